//! Local frequency guidance: six analytic cues per patch, spread back to a
//! dense map by overlap-add.
//!
//! Channel order is `[d_x, d_y, S_φ, C_hf, C_lf, Coh]`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spectral::{overlap_add_channels, wrap, LocalSpectrum, PatchGrid};
use crate::tensor::{ComplexGrid, FeatureMap};

pub const GUIDANCE_CHANNELS: usize = 6;
pub const CHANNEL_NAMES: [&str; GUIDANCE_CHANNELS] = ["d_x", "d_y", "s_phi", "c_hf", "c_lf", "coh"];
pub const DEFAULT_CUTOFF: f64 = 0.25;

/// `wrap(Φ_r − Φ_t)` elementwise.
pub fn phase_difference(rgb: &[f64], thermal: &[f64]) -> Result<Vec<f64>> {
    if rgb.len() != thermal.len() {
        return Err(Error::shape("phase_difference", format!("{} values", rgb.len()), thermal.len()));
    }
    Ok(rgb.iter().zip(thermal).map(|(&r, &t)| wrap(r - t)).collect())
}

/// Signed frequency offset of bin `i` on an `n`-point axis, in `[-n/2, n/2)`.
#[inline]
fn signed_bin(i: usize, n: usize) -> f64 {
    if i < n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Mean power `(E_hf, E_lf)` of the bins outside and inside the radius
/// `ρ` (as a fraction of the Nyquist radius `P/2`).
pub fn band_energies(spec: &ComplexGrid, cutoff: f64) -> Result<(f64, f64)> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::Config(format!("cutoff_rho must lie in (0, 1), got {cutoff}")));
    }
    let (h, w) = (spec.height(), spec.width());
    let nyquist = h.max(w) as f64 / 2.0;
    let (mut hf, mut n_hf, mut lf, mut n_lf) = (0.0, 0usize, 0.0, 0usize);
    for u in 0..h {
        for v in 0..w {
            let r = signed_bin(u, h).hypot(signed_bin(v, w)) / nyquist;
            let power = spec.get(u, v).norm_sqr();
            if r <= cutoff {
                lf += power;
                n_lf += 1;
            } else {
                hf += power;
                n_hf += 1;
            }
        }
    }
    if n_hf == 0 || n_lf == 0 {
        return Err(Error::Config(format!("cutoff {cutoff} leaves a frequency band empty on a {h}x{w} patch")));
    }
    Ok((hf / n_hf as f64, lf / n_lf as f64))
}

fn ratio(num: f64, other: f64) -> f64 {
    let total = num + other;
    if total == 0.0 {
        0.5
    } else {
        num / total
    }
}

/// `C_hf = E^r_hf / (E^r_hf + E^t_hf)` and `C_lf = E^t_lf / (E^r_lf + E^t_lf)`;
/// an empty band on both sides gives 0.5.
pub fn reliability(rgb_hf: f64, thermal_hf: f64, rgb_lf: f64, thermal_lf: f64) -> Result<(f64, f64)> {
    for (name, e) in [("rgb_hf", rgb_hf), ("thermal_hf", thermal_hf), ("rgb_lf", rgb_lf), ("thermal_lf", thermal_lf)] {
        if !(e >= 0.0) {
            return Err(Error::InvalidArgument(format!("band energy {name} must be non-negative, got {e}")));
        }
    }
    Ok((ratio(rgb_hf, thermal_hf), ratio(thermal_lf, rgb_lf)))
}

/// Normalized cross-spectral magnitude `|Σ F_r F_t*| / sqrt(Σ|F_r|² Σ|F_t|²)`,
/// 0 when either spectrum is empty.
pub fn coherence(rgb: &ComplexGrid, thermal: &ComplexGrid) -> Result<f64> {
    if (rgb.height(), rgb.width()) != (thermal.height(), thermal.width()) {
        return Err(Error::shape(
            "coherence",
            format!("{}x{}", rgb.height(), rgb.width()),
            format!("{}x{}", thermal.height(), thermal.width()),
        ));
    }
    let mut cross = num_complex::Complex64::new(0.0, 0.0);
    let (mut er, mut et) = (0.0, 0.0);
    for (a, b) in rgb.data().iter().zip(thermal.data()) {
        cross += a * b.conj();
        er += a.norm_sqr();
        et += b.norm_sqr();
    }
    if er == 0.0 || et == 0.0 {
        return Ok(0.0);
    }
    Ok((cross.norm() / (er * et).sqrt()).min(1.0))
}

/// Circular-mean orientation `(mean sin ΔΦ, mean cos ΔΦ)` and strength
/// `mean |ΔΦ|`.
pub fn displacement(dphi: &[f64]) -> (f64, f64, f64) {
    let n = dphi.len().max(1) as f64;
    let (mut s, mut c, mut l1) = (0.0, 0.0, 0.0);
    for &d in dphi {
        s += d.sin();
        c += d.cos();
        l1 += d.abs();
    }
    (s / n, c / n, l1 / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceVector {
    pub d_x: f64,
    pub d_y: f64,
    pub s_phi: f64,
    pub c_hf: f64,
    pub c_lf: f64,
    pub coh: f64,
}

impl GuidanceVector {
    pub fn to_array(&self) -> [f64; GUIDANCE_CHANNELS] {
        [self.d_x, self.d_y, self.s_phi, self.c_hf, self.c_lf, self.coh]
    }

    /// Checks the documented bounds of every component.
    pub fn check_bounds(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = self.d_x.hypot(self.d_y) <= 1.0 + 1e-6
            && self.d_x.abs() <= 1.0
            && self.d_y.abs() <= 1.0
            && (0.0..=std::f64::consts::PI).contains(&self.s_phi)
            && unit(self.c_hf)
            && unit(self.c_lf)
            && unit(self.coh);
        if ok {
            Ok(())
        } else {
            Err(Error::Numeric(format!("guidance vector out of bounds: {self:?}")))
        }
    }
}

pub fn guidance_vector(rgb: &LocalSpectrum, thermal: &LocalSpectrum, cutoff: f64) -> Result<GuidanceVector> {
    let dphi = phase_difference(&rgb.phase, &thermal.phase)?;
    let (d_x, d_y, s_phi) = displacement(&dphi);
    let (r_hf, r_lf) = band_energies(&rgb.spectrum, cutoff)?;
    let (t_hf, t_lf) = band_energies(&thermal.spectrum, cutoff)?;
    let (c_hf, c_lf) = reliability(r_hf, t_hf, r_lf, t_lf)?;
    let coh = coherence(&rgb.spectrum, &thermal.spectrum)?;
    Ok(GuidanceVector {
        d_x,
        d_y,
        s_phi,
        c_hf,
        c_lf,
        coh,
    })
}

pub fn guidance_vectors(rgb: &[LocalSpectrum], thermal: &[LocalSpectrum], cutoff: f64) -> Result<Vec<GuidanceVector>> {
    if rgb.len() != thermal.len() {
        return Err(Error::shape("guidance_vectors", format!("{} thermal patches", rgb.len()), thermal.len()));
    }
    rgb.par_iter()
        .zip(thermal)
        .map(|(r, t)| guidance_vector(r, t, cutoff))
        .collect()
}

/// Dense six-channel guidance aligned with a scale's feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap(FeatureMap);

impl GuidanceMap {
    pub fn new(map: FeatureMap) -> Result<Self> {
        if map.channels() != GUIDANCE_CHANNELS {
            return Err(Error::shape("GuidanceMap::new", "6 channels", map.channels()));
        }
        Ok(Self(map))
    }

    pub fn as_map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn into_map(self) -> FeatureMap {
        self.0
    }

    pub fn channel(&self, c: usize) -> FeatureMap {
        self.0.channel(c)
    }
}

/// Each pixel receives the mean guidance vector of the patches covering it.
pub fn project_guidance(vectors: &[GuidanceVector], grid: &PatchGrid) -> Result<GuidanceMap> {
    let values: Vec<Vec<f64>> = vectors.iter().map(|v| v.to_array().to_vec()).collect();
    let dense = overlap_add_channels(&values, GUIDANCE_CHANNELS, grid)?;
    GuidanceMap::new(FeatureMap::new(
        grid.height(),
        grid.width(),
        GUIDANCE_CHANNELS,
        dense.into_iter().map(|v| v as f32).collect(),
    )?)
}
