//! Frequency-guided spatial alignment.
//!
//! The guidance map is gated by the enhanced features, an offset field is
//! predicted from `[F^r_X, F^t_X, G̃]`, both modalities are resampled with the
//! shared offsets, and the results are fused symmetrically.

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lfgm::{GuidanceMap, GUIDANCE_CHANNELS};
use crate::params::{ParamStore, Tensor};
use crate::tensor::{concat_channels, conv2d, relu, sigmoid, ConvSpec, ConvWeights, FeatureMap};

pub const DEFAULT_SAMPLING_POINTS: usize = 9;
pub const DEFAULT_CLAMP_PX: f32 = 8.0;

/// Per-pixel displacements `(Δx_1, Δy_1, …, Δx_K, Δy_K)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    height: usize,
    width: usize,
    points: usize,
    data: Vec<f32>,
}

impl OffsetField {
    pub fn new(height: usize, width: usize, points: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 2 * points {
            return Err(Error::shape(
                "OffsetField::new",
                format!("{height}x{width}x{}", 2 * points),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("offset field contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            points,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, points: usize) -> Self {
        Self {
            height,
            width,
            points,
            data: vec![0.0; height * width * 2 * points],
        }
    }

    /// The same displacement for every sampling point at every pixel.
    pub fn uniform(height: usize, width: usize, points: usize, dx: f32, dy: f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 2 * points);
        for _ in 0..height * width * points {
            data.push(dx);
            data.push(dy);
        }
        Self {
            height,
            width,
            points,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `(Δx, Δy)` of sampling point `k` at pixel `(y, x)`.
    #[inline]
    pub fn get(&self, y: usize, x: usize, k: usize) -> (f32, f32) {
        let i = ((y * self.width + x) * self.points + k) * 2;
        (self.data[i], self.data[i + 1])
    }

    fn clamped(mut self, limit: f32) -> Self {
        for v in &mut self.data {
            *v = v.clamp(-limit, limit);
        }
        self
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// The regular `n × n` sampling lattice `{−r..=r}²` in row-major order, as
/// `(x, y)` pairs.
pub fn base_lattice(points: usize) -> Result<Vec<(f32, f32)>> {
    let side = (points as f64).sqrt().round() as usize;
    if side * side != points || side % 2 == 0 {
        return Err(Error::Config(format!("k_s must be an odd perfect square, got {points}")));
    }
    let r = (side / 2) as isize;
    Ok((-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx as f32, dy as f32)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgsaParams {
    pub gate: ConvWeights,
    pub offset_conv1: ConvWeights,
    pub offset_conv2: ConvWeights,
    pub offset_proj: ConvWeights,
    /// `[K_s, C]` depthwise aggregation weights.
    pub w_k: Vec<f32>,
    pub points: usize,
    pub fuse_rt: ConvWeights,
    pub fuse_tr: ConvWeights,
}

impl FgsaParams {
    pub const CONVS: [&'static str; 6] = ["gate_conv", "offset_conv1", "offset_conv2", "offset_proj", "fuse_rt", "fuse_tr"];

    pub fn from_store(store: &ParamStore, scale: usize) -> Result<Self> {
        let conv = |n: &str| store.conv(&format!("fgsa.{n}.{scale}"));
        let wk = store.get(&format!("fgsa.w_k.{scale}"))?;
        let [points, _] = wk.shape[..] else {
            return Err(Error::Param(format!("fgsa.w_k.{scale} must be [K_s, C], got {:?}", wk.shape)));
        };
        let p = Self {
            gate: conv("gate_conv")?,
            offset_conv1: conv("offset_conv1")?,
            offset_conv2: conv("offset_conv2")?,
            offset_proj: conv("offset_proj")?,
            w_k: wk.data.clone(),
            points,
            fuse_rt: conv("fuse_rt")?,
            fuse_tr: conv("fuse_tr")?,
        };
        p.validate(wk.shape[1])?;
        Ok(p)
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let c = channels;
        let checks = [
            ("gate_conv", (&self.gate, 1, 2 * c, GUIDANCE_CHANNELS)),
            ("offset_conv1", (&self.offset_conv1, 3, 2 * c + GUIDANCE_CHANNELS, self.offset_conv1.cout)),
            ("offset_conv2", (&self.offset_conv2, 3, self.offset_conv1.cout, self.offset_conv2.cout)),
            ("offset_proj", (&self.offset_proj, 1, self.offset_conv2.cout, 2 * self.points)),
            ("fuse_rt", (&self.fuse_rt, 3, 2 * c, c)),
            ("fuse_tr", (&self.fuse_tr, 3, 2 * c, c)),
        ];
        for (name, (w, k, cin, cout)) in checks {
            if (w.kh, w.kw, w.cin, w.cout) != (k, k, cin, cout) {
                return Err(Error::Param(format!(
                    "fgsa.{name} expected {k}x{k}x{cin}x{cout}, got {}x{}x{}x{}",
                    w.kh, w.kw, w.cin, w.cout
                )));
            }
        }
        base_lattice(self.points)?;
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.fuse_rt.cout
    }

    pub fn insert_into(&self, store: &mut ParamStore, scale: usize) -> Result<()> {
        let convs = [
            &self.gate,
            &self.offset_conv1,
            &self.offset_conv2,
            &self.offset_proj,
            &self.fuse_rt,
            &self.fuse_tr,
        ];
        for (name, w) in Self::CONVS.iter().zip(convs) {
            store.insert_conv(&format!("fgsa.{name}.{scale}"), w.clone())?;
        }
        store.insert(
            format!("fgsa.w_k.{scale}"),
            Tensor::new(vec![self.points, self.channels()], self.w_k.clone())?,
        )
    }
}

/// `σ(Conv1×1([F^r_X, F^t_X])) ⊙ G_freq`.
pub fn gate(rgb_x: &FeatureMap, thermal_x: &FeatureMap, guidance: &GuidanceMap, conv: &ConvWeights) -> Result<FeatureMap> {
    let g = guidance.as_map();
    rgb_x.check_same_spatial("gate", thermal_x)?;
    rgb_x.check_same_spatial("gate", g)?;
    if conv.kh != 1 || conv.kw != 1 || conv.cout != GUIDANCE_CHANNELS {
        return Err(Error::shape("gate", format!("1x1x{}x6 gate conv", conv.cin), format!("{}x{}x{}x{}", conv.kh, conv.kw, conv.cin, conv.cout)));
    }
    let logits = conv2d(&concat_channels(&[rgb_x, thermal_x])?, conv, ConvSpec::default())?;
    let data = logits
        .data()
        .iter()
        .zip(g.data())
        .map(|(&z, &gv)| sigmoid(z) * gv)
        .collect();
    Ok(FeatureMap::new(g.height(), g.width(), GUIDANCE_CHANNELS, data)?.with_scale(g.scale_index()))
}

/// `f_θ([F^r_X, F^t_X, G̃])`: 3×3 conv, ReLU, 3×3 conv, ReLU, 1×1 projection,
/// then clamped to `±clamp_px`.
pub fn predict_offsets(
    rgb_x: &FeatureMap,
    thermal_x: &FeatureMap,
    gated: &FeatureMap,
    params: &FgsaParams,
    clamp_px: f32,
) -> Result<OffsetField> {
    let input = concat_channels(&[rgb_x, thermal_x, gated])?;
    let h1 = conv2d(&input, &params.offset_conv1, ConvSpec::default())?.map(relu);
    let h2 = conv2d(&h1, &params.offset_conv2, ConvSpec::default())?.map(relu);
    let out = conv2d(&h2, &params.offset_proj, ConvSpec::default())?;
    Ok(OffsetField::new(out.height(), out.width(), params.points, out.into_data())?.clamped(clamp_px))
}

/// Bilinear interpolation at column `x`, row `y` of an HWC buffer. Neighbors
/// outside the grid read as zero.
#[inline]
pub fn bilinear_sample_raw<T: Float>(data: &[T], height: usize, width: usize, channels: usize, x: T, y: T, out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0.to_isize().unwrap_or(isize::MIN / 2), y0.to_isize().unwrap_or(isize::MIN / 2));
    let taps = [
        (y0, x0, (T::one() - fy) * (T::one() - fx)),
        (y0, x0 + 1, (T::one() - fy) * fx),
        (y0 + 1, x0, fy * (T::one() - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ];
    for (yy, xx, wt) in taps {
        if yy < 0 || xx < 0 || yy as usize >= height || xx as usize >= width {
            continue;
        }
        let base = (yy as usize * width + xx as usize) * channels;
        for (o, &v) in out.iter_mut().zip(&data[base..base + channels]) {
            *o = *o + wt * v;
        }
    }
}

/// Partial derivatives of [`bilinear_sample_raw`] with respect to `x` and
/// `y`, per channel. Valid away from integer coordinates.
pub fn bilinear_grad_raw<T: Float>(data: &[T], height: usize, width: usize, channels: usize, x: T, y: T) -> (Vec<T>, Vec<T>) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0.to_isize().unwrap_or(isize::MIN / 2), y0.to_isize().unwrap_or(isize::MIN / 2));
    let fetch = |yy: isize, xx: isize, c: usize| {
        if yy < 0 || xx < 0 || yy as usize >= height || xx as usize >= width {
            T::zero()
        } else {
            data[(yy as usize * width + xx as usize) * channels + c]
        }
    };
    let one = T::one();
    let mut gx = Vec::with_capacity(channels);
    let mut gy = Vec::with_capacity(channels);
    for c in 0..channels {
        let (v00, v01) = (fetch(y0, x0, c), fetch(y0, x0 + 1, c));
        let (v10, v11) = (fetch(y0 + 1, x0, c), fetch(y0 + 1, x0 + 1, c));
        gx.push((one - fy) * (v01 - v00) + fy * (v11 - v10));
        gy.push((one - fx) * (v10 - v00) + fx * (v11 - v01));
    }
    (gx, gy)
}

/// Samples every channel of `map` at column `x`, row `y`.
pub fn bilinear_sample(map: &FeatureMap, x: f32, y: f32) -> Vec<f32> {
    let mut out = vec![0.0; map.channels()];
    bilinear_sample_raw(map.data(), map.height(), map.width(), map.channels(), x, y, &mut out);
    out
}

/// `F̂(p₀) = Σ_k w_k ⊙ S(F, p₀ + p_k + Δp_k(p₀))` with depthwise weights
/// `w_k` laid out `[K_s, C]`.
pub fn deformable_sample(map: &FeatureMap, offsets: &OffsetField, w_k: &[f32]) -> Result<FeatureMap> {
    let (h, w, c) = map.dims();
    let k_s = offsets.points();
    if (offsets.height(), offsets.width()) != (h, w) {
        return Err(Error::shape("deformable_sample", format!("{h}x{w} offsets"), format!("{}x{}", offsets.height(), offsets.width())));
    }
    if w_k.len() != k_s * c {
        return Err(Error::shape(
            "deformable_sample",
            format!("{k_s}x{c} weights for {k_s} sampling points"),
            format!("{} weights", w_k.len()),
        ));
    }
    let lattice = base_lattice(k_s)?;
    let mut data = vec![0.0f32; h * w * c];
    data.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        let mut sample = vec![0.0f32; c];
        for x in 0..w {
            let acc = &mut row[x * c..(x + 1) * c];
            for (k, &(bx, by)) in lattice.iter().enumerate() {
                let wk = &w_k[k * c..(k + 1) * c];
                if wk.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let (dx, dy) = offsets.get(y, x, k);
                let sx = x as f32 + bx + dx;
                let sy = y as f32 + by + dy;
                bilinear_sample_raw(map.data(), h, w, c, sx, sy, &mut sample);
                for ((a, &s), &wt) in acc.iter_mut().zip(&sample).zip(wk) {
                    *a += wt * s;
                }
            }
        }
    });
    Ok(FeatureMap::new(h, w, c, data)?.with_scale(map.scale_index()))
}

/// `Conv3×3([F^r, F̂^t]) + Conv3×3([F^t, F̂^r])`.
pub fn fuse(
    rgb: &FeatureMap,
    warped_thermal: &FeatureMap,
    thermal: &FeatureMap,
    warped_rgb: &FeatureMap,
    fuse_rt: &ConvWeights,
    fuse_tr: &ConvWeights,
) -> Result<FeatureMap> {
    for m in [warped_thermal, thermal, warped_rgb] {
        rgb.check_same_dims("fuse", m)?;
    }
    let a = conv2d(&concat_channels(&[rgb, warped_thermal])?, fuse_rt, ConvSpec::default())?;
    let b = conv2d(&concat_channels(&[thermal, warped_rgb])?, fuse_tr, ConvSpec::default())?;
    a.add(&b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgsaOutput {
    pub gated: FeatureMap,
    pub offsets: OffsetField,
    pub warped_rgb: FeatureMap,
    pub warped_thermal: FeatureMap,
    pub fused: FeatureMap,
}

/// Gate, predict offsets, warp both modalities with the shared field, fuse.
/// `rgb`/`thermal` are the spatial features before cross-attention and
/// `rgb_x`/`thermal_x` the enhanced ones.
pub fn fgsa_forward(
    rgb: &FeatureMap,
    thermal: &FeatureMap,
    rgb_x: &FeatureMap,
    thermal_x: &FeatureMap,
    guidance: &GuidanceMap,
    params: &FgsaParams,
    clamp_px: f32,
) -> Result<FgsaOutput> {
    let gated = gate(rgb_x, thermal_x, guidance, &params.gate)?;
    let offsets = predict_offsets(rgb_x, thermal_x, &gated, params, clamp_px)?;
    let (warped_rgb, warped_thermal, fused) = warp_and_fuse(rgb, thermal, rgb_x, thermal_x, &offsets, params)?;
    Ok(FgsaOutput {
        gated,
        offsets,
        warped_rgb,
        warped_thermal,
        fused,
    })
}

/// The sampling and fusion half of [`fgsa_forward`] with an externally
/// supplied offset field.
pub fn warp_and_fuse(
    rgb: &FeatureMap,
    thermal: &FeatureMap,
    rgb_x: &FeatureMap,
    thermal_x: &FeatureMap,
    offsets: &OffsetField,
    params: &FgsaParams,
) -> Result<(FeatureMap, FeatureMap, FeatureMap)> {
    let warped_rgb = deformable_sample(rgb_x, offsets, &params.w_k)?;
    let warped_thermal = deformable_sample(thermal_x, offsets, &params.w_k)?;
    let fused = fuse(rgb, &warped_thermal, thermal, &warped_rgb, &params.fuse_rt, &params.fuse_tr)?;
    Ok((warped_rgb, warped_thermal, fused))
}

/// One-hot center weights: deformable sampling with zero offsets is then the
/// identity.
pub fn identity_w_k(points: usize, channels: usize) -> Result<Vec<f32>> {
    base_lattice(points)?;
    let mut w = vec![0.0; points * channels];
    let center = points / 2;
    w[center * channels..(center + 1) * channels].fill(1.0);
    Ok(w)
}
