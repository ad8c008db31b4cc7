//! Input degradations (Gaussian blur presets, rollout-guided occlusion) and
//! the PSNR/SSIM metrics that order them by severity.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::attention::{rank_patches, PatchGrid, RolloutResult};
use crate::error::{config, contract, Error, Result};
use crate::image::{Image, MAX_VALUE};
use crate::seed::round_half_away;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurPreset {
    pub level: &'static str,
    pub kernel_size: usize,
    pub sigma: f64,
}

/// Blur levels I..X, mildest first.
pub const BLUR_PRESETS: [BlurPreset; 10] = [
    BlurPreset { level: "I", kernel_size: 5, sigma: 1.0 },
    BlurPreset { level: "II", kernel_size: 5, sigma: 2.0 },
    BlurPreset { level: "III", kernel_size: 5, sigma: 4.0 },
    BlurPreset { level: "IV", kernel_size: 5, sigma: 9.0 },
    BlurPreset { level: "V", kernel_size: 7, sigma: 2.0 },
    BlurPreset { level: "VI", kernel_size: 7, sigma: 4.0 },
    BlurPreset { level: "VII", kernel_size: 7, sigma: 13.5 },
    BlurPreset { level: "VIII", kernel_size: 7, sigma: 15.0 },
    BlurPreset { level: "IX", kernel_size: 11, sigma: 2.0 },
    BlurPreset { level: "X", kernel_size: 11, sigma: 5.0 },
];

impl BlurPreset {
    pub fn by_level(level: &str) -> Option<BlurPreset> {
        BLUR_PRESETS.iter().copied().find(|p| p.level.eq_ignore_ascii_case(level))
    }
}

impl fmt::Display for BlurPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (k={}, sigma={})", self.level, self.kernel_size, self.sigma)
    }
}

impl FromStr for BlurPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlurPreset::by_level(s).ok_or_else(|| config(format!("unknown blur level `{s}`, expected I..X")))
    }
}

/// Occlusion levels 0%, 10%, ..., 90%.
pub fn occlusion_sweep() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

fn check_kernel(k: usize, sigma: f64) -> Result<()> {
    if k % 2 == 0 {
        return Err(config(format!("kernel size {k} must be odd")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(config(format!("sigma {sigma} must be positive")));
    }
    Ok(())
}

fn gaussian_1d(k: usize, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let x = i as f64 - r;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// `k x k` truncated Gaussian on the centred integer grid, normalized to sum 1.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<DMatrix<f64>> {
    check_kernel(k, sigma)?;
    let r = (k / 2) as f64;
    let raw = DMatrix::from_fn(k, k, |i, j| {
        let (y, x) = (i as f64 - r, j as f64 - r);
        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    });
    let s = raw.sum();
    Ok(raw / s)
}

/// Mirror an out-of-range coordinate back into `0..n` without repeating the
/// edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

fn convolve_rows(src: &[f64], h: usize, w: usize, ch: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (t, &g) in taps.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - r, w);
                    acc += g * src[(y * w + xx) * ch + c];
                }
                out[(y * w + x) * ch + c] = acc;
            }
        }
    }
    out
}

fn convolve_cols(src: &[f64], h: usize, w: usize, ch: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (t, &g) in taps.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - r, h);
                    acc += g * src[(yy * w + x) * ch + c];
                }
                out[(y * w + x) * ch + c] = acc;
            }
        }
    }
    out
}

/// Per-channel Gaussian blur with reflect padding, applied separably.
pub fn gaussian_blur(image: &Image, kernel_size: usize, sigma: f64) -> Result<Image> {
    check_kernel(kernel_size, sigma)?;
    let taps = gaussian_1d(kernel_size, sigma);
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let tmp = convolve_rows(image.data(), h, w, ch, &taps);
    Image::new(h, w, ch, convolve_cols(&tmp, h, w, ch, &taps))
}

pub fn blur(image: &Image, preset: &BlurPreset) -> Result<Image> {
    gaussian_blur(image, preset.kernel_size, preset.sigma)
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(contract(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio over all channels for 8-bit range, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (MAX_VALUE * MAX_VALUE / e).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub max_value: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, max_value: MAX_VALUE }
    }
}

/// Valid-mode separable filtering of a single-channel plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(t, g)| g * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, g)| g * rows[(y + t) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over the valid region of a Gaussian-windowed local SSIM map,
/// computed on luma.
pub fn ssim_with(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    check_same(a, b)?;
    check_kernel(params.window, params.sigma)?;
    if a.height() < params.window || a.width() < params.window {
        return Err(contract(format!(
            "{}x{} image is smaller than the {}x{} SSIM window",
            a.height(),
            a.width(),
            params.window,
            params.window
        )));
    }
    let (ga, gb) = (a.to_gray()?, b.to_gray()?);
    let (x, y) = (ga.data(), gb.data());
    let (h, w) = (ga.height(), ga.width());
    let taps = gaussian_1d(params.window, params.sigma);
    let square = |v: &[f64]| v.iter().map(|p| p * p).collect::<Vec<_>>();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();

    let (mu_x, _, _) = filter_valid(x, h, w, &taps);
    let (mu_y, _, _) = filter_valid(y, h, w, &taps);
    let (xx, _, _) = filter_valid(&square(x), h, w, &taps);
    let (yy, _, _) = filter_valid(&square(y), h, w, &taps);
    let (xy, oh, ow) = filter_valid(&xy, h, w, &taps);

    let c1 = (params.k1 * params.max_value).powi(2);
    let c2 = (params.k2 * params.max_value).powi(2);
    let total: f64 = (0..oh * ow)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / (oh * ow) as f64)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScore {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn quality(reference: &Image, degraded: &Image) -> Result<QualityScore> {
    Ok(QualityScore { psnr: psnr(reference, degraded)?, ssim: ssim(reference, degraded)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OcclusionFill {
    #[default]
    Zero,
    /// Per-channel mean of the unoccluded image.
    Mean,
}

impl FromStr for OcclusionFill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(OcclusionFill::Zero),
            "mean" => Ok(OcclusionFill::Mean),
            other => Err(config(format!("unknown occlusion fill `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionSpec {
    pub fraction: f64,
    pub fill: OcclusionFill,
}

impl OcclusionSpec {
    pub fn masked_count(&self, num_patches: usize) -> usize {
        round_half_away(self.fraction * num_patches as f64).min(num_patches)
    }
}

/// Fills the `round(p N)` most important patches; returns the occluded image
/// and a per-patch flag of what was removed.
pub fn occlude(image: &Image, grid: &PatchGrid, spec: &OcclusionSpec, ranking: &RolloutResult) -> Result<(Image, Vec<bool>)> {
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(config(format!("occlusion fraction {} outside [0, 1]", spec.fraction)));
    }
    if image.height() != grid.rows * grid.patch_size || image.width() != grid.cols * grid.patch_size {
        return Err(contract("image does not match the patch grid"));
    }
    if ranking.importance_by_patch(grid.len()).is_none() {
        return Err(contract(format!("rollout scores do not cover all {} grid patches", grid.len())));
    }
    let order = rank_patches(ranking);
    let mut mask = vec![false; grid.len()];
    for &p in order.iter().take(spec.masked_count(grid.len())) {
        mask[p] = true;
    }

    let fill = match spec.fill {
        OcclusionFill::Zero => vec![0.0; image.channels()],
        OcclusionFill::Mean => image.channel_means(),
    };
    let mut out = image.clone();
    let n = grid.patch_size;
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (r, c) = (p / grid.cols, p % grid.cols);
        for y in r * n..(r + 1) * n {
            for x in c * n..(c + 1) * n {
                for (ch, &v) in fill.iter().enumerate() {
                    out.set(y, x, ch, v);
                }
            }
        }
    }
    Ok((out, mask))
}
