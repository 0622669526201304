//! Cross-modal alignment in the local frequency domain.
//!
//! Per patch, both amplitude spectra are normalized to unit Frobenius norm and
//! blended with weight `α`; the thermal phase is moved toward the RGB phase
//! along the shorter arc by a fraction `β`. The aligned spectra are inverted
//! and overlap-added into a single-channel map `F_align`, which is then
//! injected into each modality's spatial features through windowed
//! cross-attention.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{ParamStore, Tensor};
use crate::spectral::{compose, overlap_add, wrap, Fft2d, LocalSpectrum, PatchGrid};
use crate::tensor::{sigmoid, ComplexGrid, FeatureMap};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_EMBED_DIM: usize = 32;
pub const ATTENTION_WINDOW: usize = 16;

/// Blended spectra are not exactly conjugate-symmetric, so the inverse
/// transform tolerates a larger imaginary residue before the real part is kept.
pub const ALIGNED_RESIDUE: f64 = 1e-2;

/// Drops the imaginary part of the bins that are their own conjugate partner
/// (DC and the Nyquist rows/columns). Their phases are 0 or π in each
/// modality, so interpolating between the two lands off the real axis, and
/// such a bin only ever contributes to the imaginary output that is
/// discarded anyway.
pub fn project_self_conjugate(spec: &mut ComplexGrid) {
    let (h, w) = (spec.height(), spec.width());
    for u in [0, h / 2] {
        for v in [0, w / 2] {
            spec.data_mut()[u * w + v].im = 0.0;
        }
    }
}

/// `A / (‖A‖₂ + ε)` with the Frobenius norm taken over the whole patch.
pub fn normalize_amplitude(amplitude: &[f64], eps: f64) -> Vec<f64> {
    let norm = amplitude.iter().map(|a| a * a).sum::<f64>().sqrt();
    let inv = 1.0 / (norm + eps);
    amplitude.iter().map(|a| a * inv).collect()
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} values", a.len()), format!("{} values", b.len())));
    }
    Ok(())
}

/// `α · Ã_r + (1 − α) · Ã_t`.
pub fn blend_amplitude(rgb: &[f64], thermal: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_unit("alpha", alpha)?;
    check_len("blend_amplitude", rgb, thermal)?;
    Ok(rgb
        .iter()
        .zip(thermal)
        .map(|(r, t)| alpha * r + (1.0 - alpha) * t)
        .collect())
}

/// Derivative of [`blend_amplitude`] with respect to `α`.
pub fn blend_amplitude_grad_alpha(rgb: &[f64], thermal: &[f64]) -> Vec<f64> {
    rgb.iter().zip(thermal).map(|(r, t)| r - t).collect()
}

/// `wrap(Φ_t + β · wrap(Φ_r − Φ_t))`.
pub fn align_phase(rgb: &[f64], thermal: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_unit("beta", beta)?;
    check_len("align_phase", rgb, thermal)?;
    Ok(rgb
        .iter()
        .zip(thermal)
        .map(|(&r, &t)| wrap(t + beta * wrap(r - t)))
        .collect())
}

/// Derivative of [`align_phase`] with respect to `β`, valid away from the
/// outer wrap's discontinuity.
pub fn align_phase_grad_beta(rgb: &[f64], thermal: &[f64]) -> Vec<f64> {
    rgb.iter().zip(thermal).map(|(&r, &t)| wrap(r - t)).collect()
}

/// Aligned amplitude and phase for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSpectrum {
    pub index: usize,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

pub fn align_patch(rgb: &LocalSpectrum, thermal: &LocalSpectrum, alpha: f64, beta: f64, eps: f64) -> Result<AlignedSpectrum> {
    if rgb.index != thermal.index {
        return Err(Error::InvalidArgument(format!(
            "aligning patch {} against patch {}",
            rgb.index, thermal.index
        )));
    }
    let amplitude = blend_amplitude(
        &normalize_amplitude(&rgb.amplitude, eps),
        &normalize_amplitude(&thermal.amplitude, eps),
        alpha,
    )?;
    let phase = align_phase(&rgb.phase, &thermal.phase, beta)?;
    Ok(AlignedSpectrum {
        index: rgb.index,
        amplitude,
        phase,
        alpha,
        beta,
    })
}

/// Aligns every patch pair of a scale.
pub fn align_all(rgb: &[LocalSpectrum], thermal: &[LocalSpectrum], alpha: f64, beta: f64, eps: f64) -> Result<Vec<AlignedSpectrum>> {
    if rgb.len() != thermal.len() {
        return Err(Error::shape("align_all", format!("{} thermal patches", rgb.len()), thermal.len()));
    }
    rgb.par_iter()
        .zip(thermal)
        .map(|(r, t)| align_patch(r, t, alpha, beta, eps))
        .collect()
}

/// Composes, inverts and overlap-adds the aligned spectra into `F_align`.
pub fn reconstruct_aligned(aligned: &[AlignedSpectrum], grid: &PatchGrid) -> Result<FeatureMap> {
    if aligned.len() != grid.len() {
        return Err(Error::shape("reconstruct_aligned", format!("{} patches", grid.len()), aligned.len()));
    }
    let p = grid.patch_size();
    let fft = Fft2d::new(p)?;
    let patches = aligned
        .par_iter()
        .map(|a| {
            let mut spec = compose(&a.amplitude, &a.phase, p, p)?;
            project_self_conjugate(&mut spec);
            fft.inverse(&spec, ALIGNED_RESIDUE)
        })
        .collect::<Result<Vec<_>>>()?;
    overlap_add(&patches, grid)
}

/// Projection weights for single-head windowed cross-attention.
///
/// `q_proj` is `[C, d]`, `kv_proj` is `[C_a, 2d]` (keys then values) and
/// `out_proj` is `[d, C]`, where `C` is the feature width and `C_a` the
/// channel count of the aligned map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub channels: usize,
    pub aligned_channels: usize,
    pub embed_dim: usize,
    pub q_proj: Vec<f32>,
    pub kv_proj: Vec<f32>,
    pub out_proj: Vec<f32>,
}

impl AttentionWeights {
    pub fn new(channels: usize, aligned_channels: usize, embed_dim: usize, q_proj: Vec<f32>, kv_proj: Vec<f32>, out_proj: Vec<f32>) -> Result<Self> {
        let expect = [
            ("q_proj", q_proj.len(), channels * embed_dim),
            ("kv_proj", kv_proj.len(), aligned_channels * 2 * embed_dim),
            ("out_proj", out_proj.len(), embed_dim * channels),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::shape("AttentionWeights::new", format!("{name} with {want} values"), got));
            }
        }
        Ok(Self {
            channels,
            aligned_channels,
            embed_dim,
            q_proj,
            kv_proj,
            out_proj,
        })
    }

    #[inline]
    fn key(&self, a: usize, e: usize) -> f32 {
        self.kv_proj[a * 2 * self.embed_dim + e]
    }

    #[inline]
    fn value(&self, a: usize, e: usize) -> f32 {
        self.kv_proj[a * 2 * self.embed_dim + self.embed_dim + e]
    }
}

/// Per-scale LFCA parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LfcaParams {
    pub alpha_raw: f32,
    pub beta_raw: f32,
    pub attention: AttentionWeights,
}

impl LfcaParams {
    pub fn alpha(&self) -> f64 {
        sigmoid(self.alpha_raw as f64)
    }

    pub fn beta(&self) -> f64 {
        sigmoid(self.beta_raw as f64)
    }

    pub fn from_store(store: &ParamStore, scale: usize) -> Result<Self> {
        let q = store.get(&format!("lfca.q_proj.{scale}"))?;
        let kv = store.get(&format!("lfca.kv_proj.{scale}"))?;
        let out = store.get(&format!("lfca.out_proj.{scale}"))?;
        let (&[c, d], &[ca, d2], &[d3, c2]) = (&q.shape[..], &kv.shape[..], &out.shape[..]) else {
            return Err(Error::Param(format!("lfca projections at scale {scale} must be rank 2")));
        };
        if d2 != 2 * d || d3 != d || c2 != c {
            return Err(Error::Param(format!(
                "inconsistent lfca projection shapes at scale {scale}: q {:?}, kv {:?}, out {:?}",
                q.shape, kv.shape, out.shape
            )));
        }
        Ok(Self {
            alpha_raw: store.scalar(&format!("lfca.alpha_raw.{scale}"))?,
            beta_raw: store.scalar(&format!("lfca.beta_raw.{scale}"))?,
            attention: AttentionWeights::new(c, ca, d, q.data.clone(), kv.data.clone(), out.data.clone())?,
        })
    }

    pub fn insert_into(&self, store: &mut ParamStore, scale: usize) -> Result<()> {
        let a = &self.attention;
        store.insert(format!("lfca.alpha_raw.{scale}"), Tensor::scalar(self.alpha_raw))?;
        store.insert(format!("lfca.beta_raw.{scale}"), Tensor::scalar(self.beta_raw))?;
        store.insert(format!("lfca.q_proj.{scale}"), Tensor::new(vec![a.channels, a.embed_dim], a.q_proj.clone())?)?;
        store.insert(
            format!("lfca.kv_proj.{scale}"),
            Tensor::new(vec![a.aligned_channels, 2 * a.embed_dim], a.kv_proj.clone())?,
        )?;
        store.insert(format!("lfca.out_proj.{scale}"), Tensor::new(vec![a.embed_dim, a.channels], a.out_proj.clone())?)
    }
}

/// Pixels `(y, x)` of the non-overlapping window that contains `(y0, x0)`.
fn window_pixels(height: usize, width: usize, y0: usize, x0: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let wy = y0 / ATTENTION_WINDOW * ATTENTION_WINDOW;
    let wx = x0 / ATTENTION_WINDOW * ATTENTION_WINDOW;
    (
        wy..(wy + ATTENTION_WINDOW).min(height),
        wx..(wx + ATTENTION_WINDOW).min(width),
    )
}

/// Query-side key scores: since keys are a linear function of the aligned
/// map, `q · k_j = Σ_a (q · w_k[a]) · A_j[a]`.
fn query_key_factor(f_m: &FeatureMap, w: &AttentionWeights, y: usize, x: usize) -> Vec<f64> {
    let d = w.embed_dim;
    let px = f_m.pixel(y, x);
    let mut q = vec![0.0f64; d];
    for (c, &v) in px.iter().enumerate() {
        let row = &w.q_proj[c * d..(c + 1) * d];
        for (qe, &wt) in q.iter_mut().zip(row) {
            *qe += v as f64 * wt as f64;
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    (0..w.aligned_channels)
        .map(|a| scale * (0..d).map(|e| q[e] * w.key(a, e) as f64).sum::<f64>())
        .collect()
}

/// Softmax attention weights of query `(y, x)` over its window, in
/// row-major window order.
pub fn attention_weights(f_m: &FeatureMap, f_align: &FeatureMap, w: &AttentionWeights, y: usize, x: usize) -> Vec<f64> {
    let kq = query_key_factor(f_m, w, y, x);
    let (rows, cols) = window_pixels(f_m.height(), f_m.width(), y, x);
    let scores: Vec<f64> = rows
        .flat_map(|yy| cols.clone().map(move |xx| (yy, xx)))
        .map(|(yy, xx)| {
            f_align
                .pixel(yy, xx)
                .iter()
                .zip(&kq)
                .map(|(&a, k)| a as f64 * k)
                .sum()
        })
        .collect();
    softmax(&scores)
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Taylor coefficients for the vectorized `exp` in [`moments_fma`].
const INV_FACTORIAL: [f64; 12] = [
    1.0,
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40_320.0,
    1.0 / 362_880.0,
    1.0 / 3_628_800.0,
    1.0 / 39_916_800.0,
];

fn moments_scalar(values: &[f64], kq: f64, max: f64) -> (f64, f64) {
    let (mut total, mut weighted) = (0.0, 0.0);
    for &a in values {
        let e = (kq * a - max).exp();
        total += e;
        weighted += e * a;
    }
    (total, weighted)
}

/// Four-lane AVX2 version of [`moments_scalar`]. `exp` is evaluated inline:
/// reduction to `|r| ≤ ln2/2`, a degree-12 Taylor polynomial and an exponent
/// bit shift, about 1 ulp. Arguments below −700 are raised to −700.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn moments_fma(values: &[f64], kq: f64, max: f64) -> (f64, f64) {
    use std::arch::x86_64::*;
    let shifter = _mm256_set1_pd(6_755_399_441_055_744.0);
    let floor = _mm256_set1_pd(-700.0);
    let log2e = _mm256_set1_pd(std::f64::consts::LOG2_E);
    let ln2_hi = _mm256_set1_pd(6.931_471_803_691_238_164_9e-1);
    let ln2_lo = _mm256_set1_pd(1.908_214_929_270_587_700_0e-10);
    let bias = _mm256_sub_epi64(_mm256_set1_epi64x(1023), _mm256_castpd_si256(shifter));
    let (vkq, vmax) = (_mm256_set1_pd(kq), _mm256_set1_pd(max));
    let exp4 = |a: __m256d| {
        let x = _mm256_max_pd(_mm256_fmsub_pd(vkq, a, vmax), floor);
        let t = _mm256_fmadd_pd(x, log2e, shifter);
        let n = _mm256_sub_pd(t, shifter);
        let r = _mm256_fnmadd_pd(n, ln2_lo, _mm256_fnmadd_pd(n, ln2_hi, x));
        let mut p = _mm256_set1_pd(1.0 / 479_001_600.0);
        for k in (0..12).rev() {
            p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(INV_FACTORIAL[k]));
        }
        let scale = _mm256_slli_epi64::<52>(_mm256_add_epi64(_mm256_castpd_si256(t), bias));
        _mm256_mul_pd(p, _mm256_castsi256_pd(scale))
    };
    let mut total = [_mm256_setzero_pd(); 2];
    let mut weighted = [_mm256_setzero_pd(); 2];
    let chunks = values.chunks_exact(8);
    let tail = chunks.remainder();
    for chunk in chunks {
        for h in 0..2 {
            // SAFETY: `chunk` has 8 elements, so both 4-wide loads are in bounds.
            let a = _mm256_loadu_pd(chunk.as_ptr().add(4 * h));
            let e = exp4(a);
            total[h] = _mm256_add_pd(total[h], e);
            weighted[h] = _mm256_fmadd_pd(e, a, weighted[h]);
        }
    }
    let mut lanes = [[0.0f64; 4]; 2];
    _mm256_storeu_pd(lanes[0].as_mut_ptr(), _mm256_add_pd(total[0], total[1]));
    _mm256_storeu_pd(lanes[1].as_mut_ptr(), _mm256_add_pd(weighted[0], weighted[1]));
    let (t, w) = moments_scalar(tail, kq, max);
    let fold = |v: [f64; 4]| (v[0] + v[1]) + (v[2] + v[3]);
    (fold(lanes[0]) + t, fold(lanes[1]) + w)
}

fn has_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `(Σ e_j, Σ e_j·a_j)` with `e_j = exp(kq·a_j − max)`. `fma` must come from
/// [`has_fma`].
fn softmax_moments(values: &[f64], kq: f64, max: f64, fma: bool) -> (f64, f64) {
    #[cfg(target_arch = "x86_64")]
    if fma {
        // SAFETY: callers pass `has_fma()`, so the CPU supports AVX2 and FMA.
        return unsafe { moments_fma(values, kq, max) };
    }
    let _ = fma;
    moments_scalar(values, kq, max)
}

/// `F_m + Proj(Attn(Q = F_m W_q, K/V = F_align W_kv))`, attention restricted
/// to the 16 × 16 window containing each query.
pub fn cross_attend(f_m: &FeatureMap, f_align: &FeatureMap, w: &AttentionWeights) -> Result<FeatureMap> {
    f_m.check_same_spatial("cross_attend", f_align)?;
    if f_m.channels() != w.channels || f_align.channels() != w.aligned_channels {
        return Err(Error::shape(
            "cross_attend",
            format!("{} feature and {} aligned channels", w.channels, w.aligned_channels),
            format!("{} and {}", f_m.channels(), f_align.channels()),
        ));
    }
    let (h, wd, c) = f_m.dims();
    let (d, ca) = (w.embed_dim, w.aligned_channels);
    let scale = 1.0 / (d as f64).sqrt();
    // Folded query→key product, [C, C_a], and value→output projection, [C_a, C].
    let mut query_key = vec![0.0f64; c * ca];
    let mut value_out = vec![0.0f64; ca * c];
    for a in 0..ca {
        for e in 0..d {
            let (k, v) = (w.key(a, e) as f64, w.value(a, e) as f64);
            for ch in 0..c {
                query_key[ch * ca + a] += scale * w.q_proj[ch * d + e] as f64 * k;
                value_out[a * c + ch] += v * w.out_proj[e * c + ch] as f64;
            }
        }
    }

    let fma = has_fma();
    let mut data = f_m.data().to_vec();
    data.par_chunks_mut(wd * c).enumerate().for_each(|(y, row)| {
        let mut kq = vec![0.0f64; ca];
        let mut weighted = vec![0.0f64; ca];
        let mut window: Vec<f64> = Vec::with_capacity(ATTENTION_WINDOW * ATTENTION_WINDOW * ca);
        let mut scores: Vec<f64> = Vec::with_capacity(ATTENTION_WINDOW * ATTENTION_WINDOW);
        for x0 in (0..wd).step_by(ATTENTION_WINDOW) {
            let (rows, cols) = window_pixels(h, wd, y, x0);
            window.clear();
            for yy in rows {
                for xx in cols.clone() {
                    window.extend(f_align.pixel(yy, xx).iter().map(|&v| v as f64));
                }
            }
            if ca == 1 {
                let (lo, hi) = window.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                for x in cols {
                    let kq: f64 = f_m.pixel(y, x).iter().zip(&query_key).map(|(&v, &m)| v as f64 * m).sum();
                    // Scores are kq·a, so the largest one sits at an extreme of a.
                    let max = if kq >= 0.0 { kq * hi } else { kq * lo };
                    let (total, weighted) = softmax_moments(&window, kq, max, fma);
                    let mean = weighted / total;
                    for ch in 0..c {
                        row[x * c + ch] += (mean * value_out[ch]) as f32;
                    }
                }
                continue;
            }
            for x in cols {
                kq.fill(0.0);
                for (ch, &v) in f_m.pixel(y, x).iter().enumerate() {
                    for (k, &m) in kq.iter_mut().zip(&query_key[ch * ca..(ch + 1) * ca]) {
                        *k += v as f64 * m;
                    }
                }
                scores.clear();
                scores.extend(window.chunks_exact(ca).map(|a| a.iter().zip(&kq).map(|(a, k)| a * k).sum::<f64>()));
                let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                }
                let total: f64 = scores.iter().sum();
                weighted.fill(0.0);
                for (e, a) in scores.iter().zip(window.chunks_exact(ca)) {
                    for (acc, &v) in weighted.iter_mut().zip(a) {
                        *acc += e * v;
                    }
                }
                for ch in 0..c {
                    let delta: f64 = (0..ca).map(|a| weighted[a] / total * value_out[a * c + ch]).sum();
                    row[x * c + ch] += delta as f32;
                }
            }
        }
    });
    Ok(FeatureMap::new(h, wd, c, data)?.with_scale(f_m.scale_index()))
}
