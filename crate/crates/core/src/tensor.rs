//! Dense feature containers and the convolution primitives everything else
//! builds on.
//!
//! Feature maps are stored row-major in height × width × channel order as
//! `f32`. Kernels are stored as `[kh][kw][cin][cout]`, so the innermost loop
//! of a convolution runs over contiguous output channels.

use num_complex::Complex64;
use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Number of pyramid scales used throughout the pipeline.
pub const PYRAMID_SCALES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    scale_index: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "FeatureMap::new",
                format!("{height}x{width}x{channels} = {} values", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            scale_index: 0,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            scale_index: 0,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            scale_index: 0,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a map from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            scale_index: 0,
            data,
        }
    }

    pub fn with_scale(mut self, scale_index: usize) -> Self {
        self.scale_index = scale_index;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn scale_index(&self) -> usize {
        self.scale_index
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Extracts one channel as a single-channel map.
    pub fn channel(&self, c: usize) -> FeatureMap {
        assert!(c < self.channels, "channel {c} out of range");
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect();
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: 1,
            scale_index: self.scale_index,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> FeatureMap {
        FeatureMap {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.check_same_dims("add", other)?;
        Ok(FeatureMap {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            ..self.clone()
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_dims(&self, op: &'static str, other: &FeatureMap) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                format_dims(self.dims()),
                format_dims(other.dims()),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_same_spatial(&self, op: &'static str, other: &FeatureMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }
}

pub(crate) fn format_dims((h, w, c): (usize, usize, usize)) -> String {
    format!("{h}x{w}x{c}")
}

/// Concatenates maps along the channel axis.
pub fn concat_channels(maps: &[&FeatureMap]) -> Result<FeatureMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat_channels of zero maps".into()))?;
    for m in &maps[1..] {
        first.check_same_spatial("concat_channels", m)?;
    }
    let channels: usize = maps.iter().map(|m| m.channels).sum();
    let mut data = Vec::with_capacity(first.height * first.width * channels);
    for p in 0..first.height * first.width {
        for m in maps {
            data.extend_from_slice(&m.data[p * m.channels..(p + 1) * m.channels]);
        }
    }
    Ok(FeatureMap {
        height: first.height,
        width: first.width,
        channels,
        scale_index: first.scale_index,
        data,
    })
}

/// A dense grid of complex values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "ComplexGrid::new",
                format!("{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    /// Builds a grid from separate real and imaginary planes.
    pub fn from_parts(height: usize, width: usize, real: &[f64], imag: &[f64]) -> Result<Self> {
        if real.len() != height * width || imag.len() != height * width {
            return Err(Error::shape(
                "ComplexGrid::from_parts",
                format!("{height}x{width} real and imag"),
                format!("{} real, {} imag", real.len(), imag.len()),
            ));
        }
        let data = real
            .iter()
            .zip(imag)
            .map(|(&re, &im)| Complex64::new(re, im))
            .collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.data[u * self.width + v]
    }

    pub fn real(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.re).collect()
    }

    pub fn imag(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.im).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    Zero,
    #[default]
    Reflect,
}

/// Maps an arbitrary index into `0..n` by mirror reflection without
/// repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Convolution weights with layout `[kh][kw][cin][cout]` and one bias per
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvWeights {
    pub fn new(kh: usize, kw: usize, cin: usize, cout: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weights.len() != kh * kw * cin * cout {
            return Err(Error::shape(
                "ConvWeights::new",
                format!("{kh}x{kw}x{cin}x{cout} weights"),
                format!("{} values", weights.len()),
            ));
        }
        if bias.len() != cout {
            return Err(Error::shape(
                "ConvWeights::new",
                format!("{cout} biases"),
                format!("{} values", bias.len()),
            ));
        }
        Ok(Self {
            kh,
            kw,
            cin,
            cout,
            weights,
            bias,
        })
    }

    pub fn zeros(kh: usize, kw: usize, cin: usize, cout: usize) -> Self {
        Self {
            kh,
            kw,
            cin,
            cout,
            weights: vec![0.0; kh * kw * cin * cout],
            bias: vec![0.0; cout],
        }
    }

    #[inline]
    pub fn index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.kw + kx) * self.cin + ci) * self.cout + co
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            dilation: 1,
            stride: 1,
            padding: Padding::Reflect,
        }
    }
}

impl ConvSpec {
    pub fn zero_padded() -> Self {
        Self {
            padding: Padding::Zero,
            ..Self::default()
        }
    }

    pub fn with_dilation(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }
}

/// Geometry of a convolution over a `height × width` input. Padding is
/// "same" style: `dilation · (k − 1) / 2` on each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub spec: ConvSpec,
}

impl ConvGeometry {
    fn pad(&self, k: usize) -> usize {
        self.spec.dilation * (k - 1) / 2
    }

    fn out_len(&self, n: usize, k: usize) -> usize {
        let dilated = self.spec.dilation * (k - 1) + 1;
        (n + 2 * self.pad(k) - dilated) / self.spec.stride + 1
    }

    pub fn out_height(&self) -> usize {
        self.out_len(self.height, self.kh)
    }

    pub fn out_width(&self) -> usize {
        self.out_len(self.width, self.kw)
    }

    /// Source index along one axis for output index `o` and tap `k`, or
    /// `None` when the tap falls on zero padding.
    fn source(&self, o: usize, tap: usize, k: usize, n: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + tap * self.spec.dilation) as isize - self.pad(k) as isize;
        if pos >= 0 && (pos as usize) < n {
            Some(pos as usize)
        } else {
            match self.spec.padding {
                Padding::Zero => None,
                Padding::Reflect => Some(reflect_index(pos, n)),
            }
        }
    }

    fn source_table(&self, out: usize, k: usize, n: usize) -> Vec<Option<usize>> {
        (0..out)
            .flat_map(|o| (0..k).map(move |t| (o, t)))
            .map(|(o, t)| self.source(o, t, k, n))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.spec.dilation == 0 || self.spec.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d dilation and stride must be >= 1 (got {} and {})",
                self.spec.dilation, self.spec.stride
            )));
        }
        if self.kh % 2 == 0 || self.kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernels must have odd size, got {}x{}",
                self.kh, self.kw
            )));
        }
        let dil_h = self.spec.dilation * (self.kh - 1) + 1;
        let dil_w = self.spec.dilation * (self.kw - 1) + 1;
        if dil_h > self.height + 2 * self.pad(self.kh) || dil_w > self.width + 2 * self.pad(self.kw) {
            return Err(Error::InvalidArgument("conv2d kernel larger than padded input".into()));
        }
        Ok(())
    }
}

/// Cross-correlation over raw HWC buffers, generic over the float type so the
/// same kernel serves inference (`f32`) and gradient checking (`f64`).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_raw<T>(
    input: &[T],
    cin: usize,
    weights: &[T],
    bias: Option<&[T]>,
    cout: usize,
    geom: ConvGeometry,
) -> Result<Vec<T>>
where
    T: Float + Send + Sync,
{
    geom.validate()?;
    let (h, w, kh, kw) = (geom.height, geom.width, geom.kh, geom.kw);
    debug_assert_eq!(input.len(), h * w * cin);
    debug_assert_eq!(weights.len(), kh * kw * cin * cout);
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let rows = geom.source_table(oh, kh, h);
    let cols = geom.source_table(ow, kw, w);

    let mut out = vec![T::zero(); oh * ow * cout];
    out.par_chunks_mut(ow * cout.max(1))
        .enumerate()
        .for_each(|(oy, row_out)| {
            for ox in 0..ow {
                let acc = &mut row_out[ox * cout..(ox + 1) * cout];
                match bias {
                    Some(b) => acc.copy_from_slice(b),
                    None => acc.fill(T::zero()),
                }
                for ky in 0..kh {
                    let Some(sy) = rows[oy * kh + ky] else { continue };
                    for kx in 0..kw {
                        let Some(sx) = cols[ox * kw + kx] else { continue };
                        let src = &input[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                        let wbase = (ky * kw + kx) * cin * cout;
                        for (ci, &v) in src.iter().enumerate() {
                            let wrow = &weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (a, &wt) in acc.iter_mut().zip(wrow) {
                                *a = *a + v * wt;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient of `Σ grad_out · conv2d(input)` with respect to the kernel
/// weights and biases.
pub fn conv2d_backward_weights<T>(
    input: &[T],
    cin: usize,
    grad_out: &[T],
    cout: usize,
    geom: ConvGeometry,
) -> Result<(Vec<T>, Vec<T>)>
where
    T: Float,
{
    geom.validate()?;
    let (h, w, kh, kw) = (geom.height, geom.width, geom.kh, geom.kw);
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let rows = geom.source_table(oh, kh, h);
    let cols = geom.source_table(ow, kw, w);
    let mut gw = vec![T::zero(); kh * kw * cin * cout];
    let mut gb = vec![T::zero(); cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &grad_out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for (b, &gv) in gb.iter_mut().zip(g) {
                *b = *b + gv;
            }
            for ky in 0..kh {
                let Some(sy) = rows[oy * kh + ky] else { continue };
                for kx in 0..kw {
                    let Some(sx) = cols[ox * kw + kx] else { continue };
                    for ci in 0..cin {
                        let v = input[(sy * w + sx) * cin + ci];
                        let base = ((ky * kw + kx) * cin + ci) * cout;
                        for co in 0..cout {
                            gw[base + co] = gw[base + co] + v * g[co];
                        }
                    }
                }
            }
        }
    }
    Ok((gw, gb))
}

/// `f32` convolution, parallel over output rows. Rows are independent, so
/// the result does not depend on the thread count. With AVX2/FMA the taps
/// are read in place by a register-blocked kernel; otherwise the receptive
/// fields of a row are gathered into a `[W_out, kh·kw·cin]` matrix and
/// multiplied by the kernel viewed as `[kh·kw·cin, cout]`.
pub fn conv2d_gemm(input: &[f32], cin: usize, weights: &[f32], bias: &[f32], cout: usize, geom: ConvGeometry) -> Result<Vec<f32>> {
    geom.validate()?;
    let (h, w, kh, kw) = (geom.height, geom.width, geom.kh, geom.kw);
    if input.len() != h * w * cin || weights.len() != kh * kw * cin * cout || bias.len() != cout {
        return Err(Error::shape(
            "conv2d",
            format!("{h}x{w}x{cin} input, {kh}x{kw}x{cin}x{cout} kernel"),
            format!("{} inputs, {} weights, {} biases", input.len(), weights.len(), bias.len()),
        ));
    }
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let (taps, k) = (kh * kw, kh * kw * cin);
    let rows = geom.source_table(oh, kh, h);
    let cols = geom.source_table(ow, kw, w);
    let mut out = vec![0.0f32; oh * ow * cout];
    if out.is_empty() {
        return Ok(out);
    }
    let source = |oy: usize, ox: usize, ky: usize, kx: usize| match (rows[oy * kh + ky], cols[ox * kw + kx]) {
        (Some(sy), Some(sx)) => Some((sy * w + sx) * cin),
        _ => None,
    };

    if micro::available() {
        let packed = micro::pack(weights, k, cout);
        let zeros = vec![0.0f32; cin];
        let ow_pad = ow.div_ceil(micro::PIXELS) * micro::PIXELS;
        out.par_chunks_mut(ow * cout).enumerate().for_each_init(
            || (vec![micro::ZERO; ow_pad * taps], vec![0.0f32; ow_pad * micro::LANES]),
            |(offsets, scratch), (oy, row_out)| {
                for ox in 0..ow {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            offsets[ox * taps + ky * kw + kx] = source(oy, ox, ky, kx).unwrap_or(micro::ZERO);
                        }
                    }
                }
                for (b, block) in packed.chunks_exact(k * micro::LANES).enumerate() {
                    micro::run(input, &zeros, offsets, taps, block, scratch);
                    let (co0, n) = (b * micro::LANES, micro::LANES.min(cout - b * micro::LANES));
                    for ox in 0..ow {
                        let dst = &mut row_out[ox * cout + co0..ox * cout + co0 + n];
                        for ((d, s), b) in dst.iter_mut().zip(&scratch[ox * micro::LANES..]).zip(&bias[co0..]) {
                            *d = s + b;
                        }
                    }
                }
            },
        );
        return Ok(out);
    }

    out.par_chunks_mut(ow * cout).enumerate().for_each_init(
        || vec![0.0f32; ow * k],
        |patches, (oy, row_out)| {
            for ox in 0..ow {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dst = &mut patches[ox * k + (ky * kw + kx) * cin..ox * k + (ky * kw + kx + 1) * cin];
                        match source(oy, ox, ky, kx) {
                            Some(i) => dst.copy_from_slice(&input[i..i + cin]),
                            None => dst.fill(0.0),
                        }
                    }
                }
                row_out[ox * cout..(ox + 1) * cout].copy_from_slice(bias);
            }
            // SAFETY: `patches` is ow×k, `weights` is k×cout and `row_out`
            // is ow×cout, all row-major and non-overlapping.
            unsafe {
                matrixmultiply::sgemm(
                    ow,
                    k,
                    cout,
                    1.0,
                    patches.as_ptr(),
                    k as isize,
                    1,
                    weights.as_ptr(),
                    cout as isize,
                    1,
                    1.0,
                    row_out.as_mut_ptr(),
                    cout as isize,
                    1,
                );
            }
        },
    );
    Ok(out)
}

/// Register-blocked direct convolution kernel, compiled for AVX2/FMA and
/// selected at run time. Six output pixels times sixteen output channels
/// stay in registers while the taps stream through.
mod micro {
    pub const PIXELS: usize = 6;
    pub const LANES: usize = 16;
    /// Offset marking a tap that falls in the zero padding.
    pub const ZERO: usize = usize::MAX;

    #[cfg(target_arch = "x86_64")]
    pub fn available() -> bool {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }

    #[cfg(not(target_arch = "x86_64"))]
    pub fn available() -> bool {
        false
    }

    /// `[k, cout]` weights regrouped as `[cout / LANES][k][LANES]`,
    /// zero-padded in the last block.
    pub fn pack(weights: &[f32], k: usize, cout: usize) -> Vec<f32> {
        let mut packed = vec![0.0f32; cout.div_ceil(LANES) * k * LANES];
        for kk in 0..k {
            for co in 0..cout {
                packed[((co / LANES) * k + kk) * LANES + co % LANES] = weights[kk * cout + co];
            }
        }
        packed
    }

    /// `out[p][l] = Σ_t Σ_c input[offsets[p][t] + c] · weights[t·cin + c][l]`
    /// over one row of pixels; `offsets` holds a multiple of [`PIXELS`]
    /// pixels and `zeros.len()` is the channel count.
    pub fn run(input: &[f32], zeros: &[f32], offsets: &[usize], taps: usize, weights: &[f32], out: &mut [f32]) {
        let pixels = offsets.len() / taps;
        let cin = zeros.len();
        assert!(pixels % PIXELS == 0 && weights.len() == taps * cin * LANES && out.len() >= pixels * LANES);
        assert!(offsets.iter().all(|&o| o == ZERO || o + cin <= input.len()));
        #[cfg(target_arch = "x86_64")]
        {
            assert!(available());
            // SAFETY: the required CPU features were checked above.
            unsafe { run_fma(input, zeros, offsets, taps, weights, out) }
        }
        #[cfg(not(target_arch = "x86_64"))]
        unreachable!("vector kernel requested without support")
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn run_fma(input: &[f32], zeros: &[f32], offsets: &[usize], taps: usize, weights: &[f32], out: &mut [f32]) {
        let cin = zeros.len();
        let pixels = offsets.len() / taps;
        for p0 in (0..pixels).step_by(PIXELS) {
            let mut acc = [[0.0f32; LANES]; PIXELS];
            for t in 0..taps {
                let src: [*const f32; PIXELS] = std::array::from_fn(|j| match offsets[(p0 + j) * taps + t] {
                    ZERO => zeros.as_ptr(),
                    o => input[o..o + cin].as_ptr(),
                });
                let w_tap = &weights[t * cin * LANES..(t + 1) * cin * LANES];
                for c in 0..cin {
                    let w: &[f32; LANES] = w_tap[c * LANES..(c + 1) * LANES].try_into().unwrap();
                    for j in 0..PIXELS {
                        // SAFETY: every source points at `cin` readable values.
                        let v = *src[j].add(c);
                        for l in 0..LANES {
                            acc[j][l] = v.mul_add(w[l], acc[j][l]);
                        }
                    }
                }
            }
            for (j, a) in acc.iter().enumerate() {
                out[(p0 + j) * LANES..(p0 + j + 1) * LANES].copy_from_slice(a);
            }
        }
    }
}

/// 2D cross-correlation with optional dilation and stride.
pub fn conv2d(input: &FeatureMap, kernel: &ConvWeights, spec: ConvSpec) -> Result<FeatureMap> {
    if kernel.cin != input.channels {
        return Err(Error::shape(
            "conv2d",
            format!("input with {} channels (kernel {}x{}x{}x{})", kernel.cin, kernel.kh, kernel.kw, kernel.cin, kernel.cout),
            format!("input {}", format_dims(input.dims())),
        ));
    }
    let geom = ConvGeometry {
        height: input.height,
        width: input.width,
        kh: kernel.kh,
        kw: kernel.kw,
        spec,
    };
    let data = conv2d_gemm(&input.data, input.channels, &kernel.weights, &kernel.bias, kernel.cout, geom)?;
    Ok(FeatureMap {
        height: geom.out_height(),
        width: geom.out_width(),
        channels: kernel.cout,
        scale_index: input.scale_index,
        data,
    })
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

/// Averages non-overlapping `factor × factor` blocks. Dimensions must be
/// divisible by `factor`.
pub fn area_downsample(map: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 || map.height % factor != 0 || map.width % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot area-downsample {}x{} by {factor}",
            map.height, map.width
        )));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let (oh, ow, c) = (map.height / factor, map.width / factor, map.channels);
    let norm = 1.0 / (factor * factor) as f64;
    let mut data = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += map.get(oy * factor + dy, ox * factor + dx, ch) as f64;
                    }
                }
                data.push((acc * norm) as f32);
            }
        }
    }
    Ok(FeatureMap {
        height: oh,
        width: ow,
        channels: c,
        scale_index: map.scale_index,
        data,
    })
}

/// Reflect-pads the bottom and right edges so both dimensions become
/// multiples of `multiple`.
pub fn pad_to_multiple(map: &FeatureMap, multiple: usize) -> FeatureMap {
    let ph = map.height.div_ceil(multiple) * multiple;
    let pw = map.width.div_ceil(multiple) * multiple;
    if (ph, pw) == (map.height, map.width) {
        return map.clone();
    }
    FeatureMap::from_fn(ph, pw, map.channels, |y, x, c| {
        map.get(
            reflect_index(y as isize, map.height),
            reflect_index(x as isize, map.width),
            c,
        )
    })
    .with_scale(map.scale_index)
}
