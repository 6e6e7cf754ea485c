//! Agent-mask preprocessing and the corruptions used to probe robustness:
//! label dropout, blocky approximations and patches around joints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask size mismatch: {0}")]
    Size(String),
    #[error("invalid mask pipeline parameter: {0}")]
    Param(String),
}

/// Binary image; every pixel is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, MaskError> {
        if data.len() != width * height {
            return Err(MaskError::Size(format!(
                "{width}x{height} needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn square(size: usize, data: Vec<u8>) -> Result<Self, MaskError> {
        Self::new(size, size, data)
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.data.iter().zip(&other.data).filter(|(&a, &b)| a & b == 1).count();
        let union = self.data.iter().zip(&other.data).filter(|(&a, &b)| a | b == 1).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPipelineConfig {
    pub render_scale: usize,
    pub opening_kernel: usize,
    pub noise_p: f64,
    pub approx_downsample: usize,
    pub blur_sigma: f64,
    pub threshold: f64,
    pub joint_patch_radius: usize,
}

impl Default for MaskPipelineConfig {
    fn default() -> Self {
        Self {
            render_scale: 3,
            opening_kernel: 3,
            noise_p: 0.0,
            approx_downsample: 8,
            blur_sigma: 1.5,
            threshold: 0.5,
            joint_patch_radius: 6,
        }
    }
}

impl MaskPipelineConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        let bad = |m: &str| Err(MaskError::Param(m.into()));
        if self.render_scale == 0 {
            return bad("render_scale must be at least 1");
        }
        if self.opening_kernel == 0 {
            return bad("opening_kernel must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.noise_p) {
            return bad("noise_p must lie in [0, 1]");
        }
        if self.approx_downsample == 0 {
            return bad("approx_downsample must be at least 1");
        }
        if !(self.blur_sigma >= 0.0) {
            return bad("blur_sigma must be non-negative");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Square structuring element of side `k`, anchored at its centre. Pixels
/// outside the image are ignored, which keeps erosion and dilation adjoint
/// and therefore the opening idempotent.
fn morph(m: &Mask, k: usize, erode: bool) -> Mask {
    let lo = (k / 2) as isize;
    let hi = (k - 1 - k / 2) as isize;
    let (w, h) = (m.width as isize, m.height as isize);
    let mut out = Mask::zeros(m.width, m.height);
    for r in 0..h {
        for c in 0..w {
            let mut hit = erode;
            'window: for dr in -lo..=hi {
                for dc in -lo..=hi {
                    // Dilation reflects the element so that it stays the
                    // adjoint of erosion for even sizes too.
                    let (rr, cc) = if erode { (r + dr, c + dc) } else { (r - dr, c - dc) };
                    if rr < 0 || cc < 0 || rr >= h || cc >= w {
                        continue;
                    }
                    let v = m.data[(rr * w + cc) as usize] == 1;
                    if erode && !v {
                        hit = false;
                        break 'window;
                    }
                    if !erode && v {
                        hit = true;
                        break 'window;
                    }
                }
            }
            out.data[(r * w + c) as usize] = u8::from(hit);
        }
    }
    out
}

pub fn erode(m: &Mask, k: usize) -> Mask {
    morph(m, k, true)
}

pub fn dilate(m: &Mask, k: usize) -> Mask {
    morph(m, k, false)
}

/// Erosion followed by dilation.
pub fn opening(m: &Mask, k: usize) -> Mask {
    dilate(&erode(m, k), k)
}

/// Block-average downsample by `factor`, keeping blocks at least half full.
pub fn area_downsample(m: &Mask, factor: usize) -> Result<Mask, MaskError> {
    if m.width % factor != 0 || m.height % factor != 0 {
        return Err(MaskError::Size(format!(
            "{}x{} not divisible by {factor}",
            m.width, m.height
        )));
    }
    let (w, h) = (m.width / factor, m.height / factor);
    let mut out = Mask::zeros(w, h);
    let need = factor * factor;
    for r in 0..h {
        for c in 0..w {
            let mut sum = 0;
            for dr in 0..factor {
                for dc in 0..factor {
                    sum += m.get(r * factor + dr, c * factor + dc) as usize;
                }
            }
            out.data[r * w + c] = u8::from(2 * sum >= need);
        }
    }
    Ok(out)
}

/// Cleans a mask rendered at `target · render_scale`: opening removes thin
/// artefacts, then the area downsample brings it to `target`.
pub fn preprocess(highres: &Mask, target: usize, cfg: &MaskPipelineConfig) -> Result<Mask, MaskError> {
    let want = target * cfg.render_scale;
    if highres.width != want || highres.height != want {
        return Err(MaskError::Size(format!(
            "expected {want}x{want} for target {target} at scale {}, got {}x{}",
            cfg.render_scale, highres.width, highres.height
        )));
    }
    area_downsample(&opening(highres, cfg.opening_kernel), cfg.render_scale)
}

/// Drops each agent pixel independently with probability `p`.
pub fn add_noise(m: &Mask, p: f64, rng: &mut Rng) -> Mask {
    let data = m
        .data
        .iter()
        .map(|&v| if v == 1 && rng.bernoulli(p) { 0 } else { v })
        .collect();
    Mask { data, ..*m }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn blur(values: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * values[y * width + clamp(x as isize + i as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * tmp[clamp(y as isize + i as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Coarse approximation: nearest-neighbour downsample, upsample back, blur
/// and threshold.
pub fn approximate(m: &Mask, cfg: &MaskPipelineConfig) -> Mask {
    let f = cfg.approx_downsample;
    let (sw, sh) = (m.width.div_ceil(f), m.height.div_ceil(f));
    // Each coarse cell takes the value at its block centre.
    let pick = |i: usize, n: usize| (i * f + f / 2).min(n - 1);
    let coarse: Vec<u8> = (0..sh)
        .flat_map(|r| (0..sw).map(move |c| (r, c)))
        .map(|(r, c)| m.get(pick(r, m.height), pick(c, m.width)))
        .collect();
    let up: Vec<f64> = (0..m.height)
        .flat_map(|r| (0..m.width).map(move |c| (r, c)))
        .map(|(r, c)| coarse[(r / f) * sw + c / f] as f64)
        .collect();
    let smooth = blur(&up, m.width, m.height, cfg.blur_sigma);
    Mask {
        width: m.width,
        height: m.height,
        data: smooth.iter().map(|&v| u8::from(v >= cfg.threshold)).collect(),
    }
}

/// Union of filled discs (`dr² + dc² ≤ radius²`) around each `(row, col)`.
pub fn joint_patches(joints: &[(usize, usize)], radius: usize, width: usize, height: usize) -> Mask {
    let mut out = Mask::zeros(width, height);
    let r = radius as isize;
    for &(jr, jc) in joints {
        for dr in -r..=r {
            for dc in -r..=r {
                let (rr, cc) = (jr as isize + dr, jc as isize + dc);
                if dr * dr + dc * dc <= r * r && rr >= 0 && cc >= 0 && (rr as usize) < height && (cc as usize) < width {
                    out.data[rr as usize * width + cc as usize] = 1;
                }
            }
        }
    }
    out
}

/// How training masks are derived from the renderer's exact masks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    Exact,
    /// Rendered at `render_scale` and cleaned with [`preprocess`].
    Preprocessed,
    Noisy,
    Approximate,
    JointPatches,
}
