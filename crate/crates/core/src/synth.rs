//! Synthetic RGB-thermal pairs with a known displacement, textured clutter
//! and low-contrast targets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::luma;
use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::rng::XorShift64Star;
use crate::tensor::{reflect_index, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    PerlinLike,
    Checker,
    Blobs,
}

impl FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perlin-like" | "perlin" => Ok(Self::PerlinLike),
            "checker" => Ok(Self::Checker),
            "blobs" => Ok(Self::Blobs),
            other => Err(Error::Config(format!("unknown texture `{other}` (expected perlin-like, checker or blobs)"))),
        }
    }
}

impl fmt::Display for Texture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerlinLike => "perlin-like",
            Self::Checker => "checker",
            Self::Blobs => "blobs",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Displacement `(dx, dy)` of the thermal image relative to RGB, pixels.
    pub shift: (f64, f64),
    pub intensity_gain: f64,
    pub noise_sigma: f64,
    pub texture: Texture,
    pub n_targets: usize,
    /// Inclusive range of target diameters in pixels.
    pub target_size_range: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 128,
            width: 128,
            shift: (2.0, 0.0),
            intensity_gain: 1.0,
            noise_sigma: 0.0,
            texture: Texture::PerlinLike,
            n_targets: 3,
            target_size_range: (4, 12),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let min_side = self.height.min(self.width);
        if min_side < 8 {
            return Err(Error::Config(format!("synthetic image must be at least 8x8, got {}x{}", self.height, self.width)));
        }
        let (dx, dy) = self.shift;
        if !(dx.is_finite() && dy.is_finite()) || dx.hypot(dy) >= min_side as f64 / 4.0 {
            return Err(Error::Config(format!("shift ({dx}, {dy}) must be shorter than {}", min_side as f64 / 4.0)));
        }
        if !(self.intensity_gain > 0.0 && self.intensity_gain.is_finite()) {
            return Err(Error::Config(format!("intensity gain must be positive, got {}", self.intensity_gain)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be non-negative, got {}", self.noise_sigma)));
        }
        let (lo, hi) = self.target_size_range;
        if self.n_targets > 0 && (lo < 2 || hi < lo || hi > min_side / 2) {
            return Err(Error::Config(format!("target size range {lo}..={hi} must satisfy 2 <= lo <= hi <= {}", min_side / 2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub rgb: FeatureMap,
    pub thermal: FeatureMap,
    pub shift: (f64, f64),
    pub boxes: Vec<BBox>,
    /// Target contrast above the local background, per box.
    pub contrasts: Vec<f64>,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Sum of three octaves of smoothly interpolated lattice noise, in `[0, 1]`.
fn value_noise(h: usize, w: usize, rng: &mut XorShift64Star) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut total = 0.0;
    for (cell, amp) in [(32usize, 0.5), (16, 0.3), (8, 0.2)] {
        let (gh, gw) = (h / cell + 2, w / cell + 2);
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.next_f64()).collect();
        for y in 0..h {
            let (gy, ty) = (y / cell, smoothstep((y % cell) as f64 / cell as f64));
            for x in 0..w {
                let (gx, tx) = (x / cell, smoothstep((x % cell) as f64 / cell as f64));
                let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
                let bottom = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
                out[y * w + x] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total += amp;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn checker(h: usize, w: usize, rng: &mut XorShift64Star) -> Vec<f64> {
    let cell = rng.range(6, 17);
    let (lo, hi) = (rng.uniform(0.25, 0.45), rng.uniform(0.55, 0.75));
    (0..h * w)
        .map(|i| if ((i / w) / cell + (i % w) / cell) % 2 == 0 { lo } else { hi })
        .collect()
}

fn blobs(h: usize, w: usize, rng: &mut XorShift64Star) -> Vec<f64> {
    let mut out = vec![0.3; h * w];
    for _ in 0..12 {
        let (cy, cx) = (rng.uniform(0.0, h as f64), rng.uniform(0.0, w as f64));
        let sigma = rng.uniform(4.0, h.min(w) as f64 / 4.0);
        let amp = rng.uniform(-0.2, 0.3);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                out[y * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Bilinear read of a single-channel map at column `x`, row `y`, with
/// reflect padding outside the grid.
pub fn sample_reflect(map: &FeatureMap, x: f64, y: f64) -> f64 {
    let (h, w) = (map.height(), map.width());
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |yy: isize, xx: isize| map.get(reflect_index(yy, h), reflect_index(xx, w), 0) as f64;
    let mut v = at(y0, x0) * (1.0 - fx) * (1.0 - fy);
    if fx != 0.0 {
        v += at(y0, x0 + 1) * fx * (1.0 - fy);
    }
    if fy != 0.0 {
        v += at(y0 + 1, x0) * (1.0 - fx) * fy;
        if fx != 0.0 {
            v += at(y0 + 1, x0 + 1) * fx * fy;
        }
    }
    v
}

/// `thermal(p) = gain · luma(p − shift) + noise`.
pub fn generate_pair(cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = XorShift64Star::new(cfg.seed);
    let base = match cfg.texture {
        Texture::PerlinLike => value_noise(h, w, &mut rng),
        Texture::Checker => checker(h, w, &mut rng),
        Texture::Blobs => blobs(h, w, &mut rng),
    };
    // A second, fainter field decorrelates the colour channels.
    let tint = value_noise(h, w, &mut rng);
    let gains = [rng.uniform(0.8, 1.1), rng.uniform(0.8, 1.1), rng.uniform(0.8, 1.1)];
    let mut rgb: Vec<f64> = (0..h * w)
        .flat_map(|i| {
            let t = 0.15 * (tint[i] - 0.5);
            [(base[i] * gains[0] + t), (base[i] * gains[1]), (base[i] * gains[2] - t)]
        })
        .collect();

    let mut boxes = Vec::with_capacity(cfg.n_targets);
    let mut contrasts = Vec::with_capacity(cfg.n_targets);
    let (lo, hi) = cfg.target_size_range;
    for _ in 0..cfg.n_targets {
        let size = rng.range(lo, hi + 1);
        let r = size as f64 / 2.0;
        let cy = rng.uniform(r, h as f64 - r);
        let cx = rng.uniform(r, w as f64 - r);
        // Includes near-camouflage targets barely above the background.
        let contrast = rng.uniform(0.03, 0.4);
        for y in (cy - r).floor().max(0.0) as usize..((cy + r).ceil() as usize).min(h) {
            for x in (cx - r).floor().max(0.0) as usize..((cx + r).ceil() as usize).min(w) {
                let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt() / r;
                let a = (1.0 - d * d).max(0.0);
                for c in 0..3 {
                    rgb[(y * w + x) * 3 + c] += contrast * a;
                }
            }
        }
        boxes.push(BBox::new(cx - r, cy - r, size as f64, size as f64)?);
        contrasts.push(contrast);
    }
    let rgb = FeatureMap::new(h, w, 3, rgb.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())?;

    let y_map = luma(&rgb)?;
    let (dx, dy) = cfg.shift;
    let mut thermal = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = sample_reflect(&y_map, x as f64 - dx, y as f64 - dy);
            let noise = if cfg.noise_sigma > 0.0 { cfg.noise_sigma * rng.normal() } else { 0.0 };
            thermal.push((cfg.intensity_gain * v + noise) as f32);
        }
    }
    Ok(SynthPair {
        rgb,
        thermal: FeatureMap::new(h, w, 1, thermal)?,
        shift: cfg.shift,
        boxes,
        contrasts,
    })
}

/// Integer lag `(lx, ly)` maximizing the zero-mean normalized correlation
/// between `a(p)` and `b(p + lag)` over `|lx|, |ly| ≤ max_lag`.
pub fn correlation_peak(a: &FeatureMap, b: &FeatureMap, max_lag: usize) -> Result<(isize, isize)> {
    a.check_same_dims("correlation_peak", b)?;
    let (h, w) = (a.height() as isize, a.width() as isize);
    let m = max_lag as isize;
    if 2 * m >= h.min(w) {
        return Err(Error::InvalidArgument(format!("lag {max_lag} too large for {h}x{w}")));
    }
    let mut best = ((0, 0), f64::NEG_INFINITY);
    for ly in -m..=m {
        for lx in -m..=m {
            let mut pairs = Vec::new();
            for y in m..h - m {
                for x in m..w - m {
                    pairs.push((a.get(y as usize, x as usize, 0) as f64, b.get((y + ly) as usize, (x + lx) as usize, 0) as f64));
                }
            }
            let n = pairs.len() as f64;
            let (ma, mb) = pairs.iter().fold((0.0, 0.0), |(s, t), (p, q)| (s + p, t + q));
            let (ma, mb) = (ma / n, mb / n);
            let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
            for (p, q) in &pairs {
                cov += (p - ma) * (q - mb);
                va += (p - ma) * (p - ma);
                vb += (q - mb) * (q - mb);
            }
            let r = if va == 0.0 || vb == 0.0 { 0.0 } else { cov / (va * vb).sqrt() };
            if r > best.1 {
                best = ((lx, ly), r);
            }
        }
    }
    Ok(best.0)
}

/// Pixels at least `margin` away from every border.
pub fn interior_mask(height: usize, width: usize, margin: usize) -> Vec<bool> {
    (0..height * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            y >= margin && x >= margin && y + margin < height && x + margin < width
        })
        .collect()
}

/// Mean absolute difference over the masked pixels and all channels.
pub fn alignment_error(warped: &FeatureMap, reference: &FeatureMap, mask: &[bool]) -> Result<f64> {
    warped.check_same_dims("alignment_error", reference)?;
    if mask.len() != warped.height() * warped.width() {
        return Err(Error::shape("alignment_error", format!("{} mask entries", warped.height() * warped.width()), mask.len()));
    }
    let c = warped.channels();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for k in 0..c {
            sum += (warped.data()[i * c + k] as f64 - reference.data()[i * c + k] as f64).abs();
        }
        n += c;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("alignment mask selects no pixels".into()));
    }
    Ok(sum / n as f64)
}
