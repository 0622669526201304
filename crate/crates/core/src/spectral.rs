//! Patch tiling, per-patch 2D FFT, amplitude/phase decomposition and
//! overlap-add reconstruction.
//!
//! Patches are `P × P` with `P ∈ {8, 16, 32}` and stride `S` dividing `P`.
//! Tiling starts `P − S` pixels before the image origin and continues until
//! every pixel is covered by `(P / S)²` patches; samples outside the image
//! are reflected back in. With uniform coverage, overlap-add of an
//! unmodified partition reproduces the source map.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{reflect_index, ComplexGrid, FeatureMap};

pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const DEFAULT_STRIDE: usize = 8;

/// Maximum tolerated `max|imag| / max|real|` after an inverse transform of a
/// spectrum that came from real data.
pub const REAL_SPECTRUM_RESIDUE: f64 = 1e-4;

/// Row-major `P × P` real samples.
pub type Patch = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    patch_size: usize,
    stride: usize,
    height: usize,
    width: usize,
    rows: usize,
    cols: usize,
    count_map: Vec<u32>,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if !matches!(patch_size, 8 | 16 | 32) {
            return Err(Error::Config(format!("patch_size must be 8, 16 or 32, got {patch_size}")));
        }
        if stride == 0 || stride > patch_size || patch_size % stride != 0 {
            return Err(Error::Config(format!(
                "stride must divide patch_size {patch_size}, got {stride}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("patch grid over an empty image".into()));
        }
        let lead = patch_size - stride;
        let rows = (height + lead).div_ceil(stride);
        let cols = (width + lead).div_ceil(stride);
        let mut grid = Self {
            patch_size,
            stride,
            height,
            width,
            rows,
            cols,
            count_map: vec![0; height * width],
        };
        for q in 0..grid.len() {
            let (oy, ox) = grid.origin(q);
            for py in 0..patch_size {
                for px in 0..patch_size {
                    let (y, x) = (oy + py as isize, ox + px as isize);
                    if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                        grid.count_map[y as usize * width + x as usize] += 1;
                    }
                }
            }
        }
        Ok(grid)
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Patches per column and per row.
    pub fn layout(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left pixel `(y, x)` of patch `q`, possibly negative.
    pub fn origin(&self, q: usize) -> (isize, isize) {
        let lead = (self.patch_size - self.stride) as isize;
        let (r, c) = (q / self.cols, q % self.cols);
        (
            (r * self.stride) as isize - lead,
            (c * self.stride) as isize - lead,
        )
    }

    /// Index of the patch whose origin is `(y, x)`, if any.
    pub fn patch_at(&self, y: isize, x: isize) -> Option<usize> {
        let lead = (self.patch_size - self.stride) as isize;
        let (ry, rx) = (y + lead, x + lead);
        let s = self.stride as isize;
        if ry < 0 || rx < 0 || ry % s != 0 || rx % s != 0 {
            return None;
        }
        let (r, c) = ((ry / s) as usize, (rx / s) as usize);
        (r < self.rows && c < self.cols).then_some(r * self.cols + c)
    }

    /// Number of patches covering each pixel, row-major.
    pub fn count_map(&self) -> &[u32] {
        &self.count_map
    }

    /// Number of in-image pixels covered by patch `q`.
    pub fn covered_pixels(&self, q: usize) -> usize {
        let mut n = 0;
        self.for_each_covered(q, |_, _| n += 1);
        n
    }

    /// Visits in-image pixels of patch `q` as `(patch_offset, pixel_offset)`.
    fn for_each_covered(&self, q: usize, mut f: impl FnMut(usize, usize)) {
        let (oy, ox) = self.origin(q);
        let p = self.patch_size;
        for py in 0..p {
            let y = oy + py as isize;
            if y < 0 || y as usize >= self.height {
                continue;
            }
            for px in 0..p {
                let x = ox + px as isize;
                if x < 0 || x as usize >= self.width {
                    continue;
                }
                let pix = y as usize * self.width + x as usize;
                f(py * p + px, pix);
            }
        }
    }

    fn check_map(&self, op: &'static str, map: &FeatureMap) -> Result<()> {
        if map.channels() != 1 || map.height() != self.height || map.width() != self.width {
            return Err(Error::shape(
                op,
                format!("{}x{}x1", self.height, self.width),
                format!("{}x{}x{}", map.height(), map.width(), map.channels()),
            ));
        }
        Ok(())
    }
}

/// Cuts a single-channel map into the grid's patches; out-of-image samples
/// are reflected.
pub fn partition(map: &FeatureMap, grid: &PatchGrid) -> Result<Vec<Patch>> {
    grid.check_map("partition", map)?;
    let p = grid.patch_size;
    Ok((0..grid.len())
        .map(|q| {
            let (oy, ox) = grid.origin(q);
            let mut patch = Vec::with_capacity(p * p);
            for py in 0..p {
                let y = reflect_index(oy + py as isize, grid.height);
                for px in 0..p {
                    let x = reflect_index(ox + px as isize, grid.width);
                    patch.push(map.get(y, x, 0) as f64);
                }
            }
            patch
        })
        .collect())
}

/// Averages patch contributions per pixel: each output pixel is the mean of
/// the values that all covering patches hold for it.
pub fn overlap_add(patches: &[Patch], grid: &PatchGrid) -> Result<FeatureMap> {
    let data = overlap_add_channels(patches, 1, grid)?;
    FeatureMap::new(grid.height, grid.width, 1, data.into_iter().map(|v| v as f32).collect())
}

/// Overlap-add for `channels` values per patch position. `values[q]` holds
/// either `P² · channels` samples (per-pixel data) or exactly `channels`
/// samples (a constant vector per patch).
pub(crate) fn overlap_add_channels(values: &[Vec<f64>], channels: usize, grid: &PatchGrid) -> Result<Vec<f64>> {
    if values.len() != grid.len() {
        return Err(Error::shape("overlap_add", format!("{} patches", grid.len()), format!("{} patches", values.len())));
    }
    let p2 = grid.patch_size * grid.patch_size;
    let mut acc = vec![0.0f64; grid.height * grid.width * channels];
    for (q, v) in values.iter().enumerate() {
        let per_pixel = match v.len() {
            n if n == p2 * channels => true,
            n if n == channels => false,
            n => {
                return Err(Error::shape(
                    "overlap_add",
                    format!("{} or {channels} values per patch", p2 * channels),
                    format!("{n} values in patch {q}"),
                ))
            }
        };
        grid.for_each_covered(q, |off, pix| {
            let src = if per_pixel { &v[off * channels..(off + 1) * channels] } else { &v[..] };
            for (a, s) in acc[pix * channels..(pix + 1) * channels].iter_mut().zip(src) {
                *a += s;
            }
        });
    }
    for (pix, &n) in grid.count_map.iter().enumerate() {
        let inv = 1.0 / n as f64;
        for a in &mut acc[pix * channels..(pix + 1) * channels] {
            *a *= inv;
        }
    }
    Ok(acc)
}

/// Precomputed radix-2 tables for square transforms of one size.
#[derive(Debug, Clone)]
pub struct Fft2d {
    size: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl Fft2d {
    pub fn new(size: usize) -> Result<Self> {
        if !size.is_power_of_two() || size < 2 {
            return Err(Error::Config(format!("FFT size must be a power of two >= 2, got {size}")));
        }
        let bits = size.trailing_zeros();
        let bitrev = (0..size)
            .map(|i| i.reverse_bits() >> (usize::BITS - bits))
            .collect();
        let twiddles = (0..size / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / size as f64))
            .collect();
        Ok(Self {
            size,
            twiddles,
            bitrev,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// In-place iterative decimation-in-time transform of `n` samples spaced
    /// `step` apart.
    fn transform_1d(&self, buf: &mut [Complex64], offset: usize, step: usize, inverse: bool) {
        let n = self.size;
        let at = |i: usize| offset + i * step;
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(at(i), at(j));
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let tw_step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * tw_step];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[at(start + k)];
                    let b = buf[at(start + k + half)] * w;
                    buf[at(start + k)] = a + b;
                    buf[at(start + k + half)] = a - b;
                }
            }
            len <<= 1;
        }
    }

    fn transform_2d(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.size;
        for r in 0..n {
            self.transform_1d(buf, r * n, 1, inverse);
        }
        for c in 0..n {
            self.transform_1d(buf, c, n, inverse);
        }
    }

    /// Unnormalized forward DFT of a real `P × P` patch. The result is
    /// exactly conjugate-symmetric: rounding differences between `F(k)` and
    /// `conj(F(−k))` are averaged away so that phases of near-empty bins stay
    /// mirror images of each other.
    pub fn forward(&self, patch: &[f64]) -> Result<ComplexGrid> {
        let n = self.size;
        if patch.len() != n * n {
            return Err(Error::shape("fft2d", format!("{n}x{n} patch"), format!("{} samples", patch.len())));
        }
        let mut buf: Vec<Complex64> = patch.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform_2d(&mut buf, false);
        for u in 0..n {
            for v in 0..n {
                let (i, j) = (u * n + v, ((n - u) % n) * n + (n - v) % n);
                if i < j {
                    let z = (buf[i] + buf[j].conj()) * 0.5;
                    buf[i] = z;
                    buf[j] = z.conj();
                } else if i == j {
                    buf[i].im = 0.0;
                }
            }
        }
        ComplexGrid::new(n, n, buf)
    }

    /// Inverse DFT with `1/P²` normalization, returning the full complex result.
    pub fn inverse_complex(&self, spec: &ComplexGrid) -> Result<Vec<Complex64>> {
        let n = self.size;
        if spec.height() != n || spec.width() != n {
            return Err(Error::shape("ifft2d", format!("{n}x{n} spectrum"), format!("{}x{}", spec.height(), spec.width())));
        }
        let mut buf = spec.data().to_vec();
        self.transform_2d(&mut buf, true);
        let norm = 1.0 / (n * n) as f64;
        for z in &mut buf {
            *z *= norm;
        }
        Ok(buf)
    }

    /// Inverse DFT keeping the real part. Fails when the discarded imaginary
    /// part exceeds `residue_tol · max|real|`, which means the spectrum was
    /// not conjugate-symmetric.
    pub fn inverse(&self, spec: &ComplexGrid, residue_tol: f64) -> Result<Patch> {
        let buf = self.inverse_complex(spec)?;
        let max_re = buf.iter().fold(0.0f64, |m, z| m.max(z.re.abs()));
        let max_im = buf.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
        if max_im > residue_tol * max_re && max_im > 1e-12 {
            return Err(Error::Numeric(format!(
                "inverse FFT imaginary residue {max_im:.3e} exceeds {residue_tol:.0e} of real magnitude {max_re:.3e}; spectrum is not conjugate-symmetric"
            )));
        }
        Ok(buf.into_iter().map(|z| z.re).collect())
    }
}

/// Forward 2D FFT of a square patch whose side is inferred from its length.
pub fn fft2d(patch: &[f64]) -> Result<ComplexGrid> {
    Fft2d::new(square_side(patch.len())?)?.forward(patch)
}

/// Inverse 2D FFT with the default real-spectrum residue check.
pub fn ifft2d(spec: &ComplexGrid) -> Result<Patch> {
    if spec.height() != spec.width() {
        return Err(Error::shape("ifft2d", "square spectrum", format!("{}x{}", spec.height(), spec.width())));
    }
    Fft2d::new(spec.height())?.inverse(spec, REAL_SPECTRUM_RESIDUE)
}

fn square_side(len: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len {
        return Err(Error::shape("fft2d", "square patch", format!("{len} samples")));
    }
    Ok(side)
}

/// Splits a spectrum into modulus and angle. The angle of a zero bin is 0.
pub fn decompose(spec: &ComplexGrid) -> (Vec<f64>, Vec<f64>) {
    spec.data()
        .iter()
        .map(|z| {
            let a = z.norm();
            let phi = if a == 0.0 { 0.0 } else { z.im.atan2(z.re) };
            (a, phi)
        })
        .unzip()
}

/// Rebuilds `A · e^{jΦ}` on an `h × w` grid.
pub fn compose(amplitude: &[f64], phase: &[f64], height: usize, width: usize) -> Result<ComplexGrid> {
    if amplitude.len() != height * width || phase.len() != height * width {
        return Err(Error::shape(
            "compose",
            format!("{height}x{width} amplitude and phase"),
            format!("{} amplitude, {} phase", amplitude.len(), phase.len()),
        ));
    }
    if let Some(bad) = amplitude.iter().find(|a| !(**a >= 0.0)) {
        return Err(Error::InvalidArgument(format!("compose got negative amplitude {bad}")));
    }
    let data = amplitude
        .iter()
        .zip(phase)
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    ComplexGrid::new(height, width, data)
}

/// Maps an angle to `[-π, π]`, congruent modulo 2π.
#[inline]
pub fn wrap(angle: f64) -> f64 {
    (angle - 2.0 * PI * (angle / (2.0 * PI)).round()).clamp(-PI, PI)
}

pub fn wrap_grid(angles: &[f64]) -> Vec<f64> {
    angles.iter().map(|&a| wrap(a)).collect()
}

/// Spectrum of one patch together with its amplitude and phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSpectrum {
    pub index: usize,
    pub spectrum: ComplexGrid,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl LocalSpectrum {
    pub fn new(index: usize, spectrum: ComplexGrid) -> Self {
        let (amplitude, phase) = decompose(&spectrum);
        Self {
            index,
            spectrum,
            amplitude,
            phase,
        }
    }

    pub fn size(&self) -> usize {
        self.spectrum.height()
    }
}

/// Partitions a single-channel map and transforms every patch.
pub fn local_spectra(map: &FeatureMap, grid: &PatchGrid) -> Result<Vec<LocalSpectrum>> {
    let fft = Fft2d::new(grid.patch_size)?;
    partition(map, grid)?
        .par_iter()
        .enumerate()
        .map(|(q, patch)| Ok(LocalSpectrum::new(q, fft.forward(patch)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(h, w, 1, |y, x, _| (y * w + x) as f32)
    }

    #[test]
    fn corner_patch_of_single_tile_map_is_the_map() {
        let m = ramp(16, 16);
        let grid = PatchGrid::new(16, 16, 16, 8).unwrap();
        let patches = partition(&m, &grid).unwrap();
        assert_eq!(patches.len(), grid.len());
        let q = grid.patch_at(0, 0).unwrap();
        let expected: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
        assert_eq!(patches[q], expected);
    }

    #[test]
    fn constant_map_gives_constant_patches() {
        let m = FeatureMap::filled(20, 27, 1, 0.25);
        let grid = PatchGrid::new(20, 27, 16, 8).unwrap();
        for p in partition(&m, &grid).unwrap() {
            assert!(p.iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn ramp_window_at_offset_matches_direct_indexing() {
        let m = ramp(32, 32);
        let grid = PatchGrid::new(32, 32, 16, 8).unwrap();
        let patches = partition(&m, &grid).unwrap();
        let q = grid.patch_at(8, 8).unwrap();
        for py in 0..16 {
            for px in 0..16 {
                assert_eq!(patches[q][py * 16 + px], ((8 + py) * 32 + 8 + px) as f64);
            }
        }
    }

    #[test]
    fn coverage_is_uniform() {
        let grid = PatchGrid::new(37, 21, 16, 8).unwrap();
        assert!(grid.count_map().iter().all(|&n| n == 4));
        let grid = PatchGrid::new(8, 8, 16, 8).unwrap();
        assert!(grid.count_map().iter().all(|&n| n == 4));
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(PatchGrid::new(16, 16, 12, 6).is_err());
        assert!(PatchGrid::new(16, 16, 16, 6).is_err());
        assert!(PatchGrid::new(16, 16, 16, 0).is_err());
    }

    #[test]
    fn partition_rejects_wrong_dims() {
        let grid = PatchGrid::new(16, 16, 16, 8).unwrap();
        assert!(partition(&ramp(16, 17), &grid).is_err());
        assert!(partition(&FeatureMap::zeros(16, 16, 2), &grid).is_err());
    }

    #[test]
    fn fft_of_simple_patches() {
        let zero = fft2d(&vec![0.0; 256]).unwrap();
        assert!(zero.data().iter().all(|z| z.norm() == 0.0));

        let c = 0.3;
        let constant = fft2d(&vec![c; 256]).unwrap();
        assert!((constant.get(0, 0).re - 256.0 * c).abs() < 1e-4);
        for (i, z) in constant.data().iter().enumerate().skip(1) {
            assert!(z.norm() < 1e-4, "bin {i}");
        }

        let mut impulse = vec![0.0; 256];
        impulse[0] = 1.0;
        for z in fft2d(&impulse).unwrap().data() {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn fft_rejects_non_power_of_two() {
        assert!(fft2d(&vec![0.0; 144]).is_err());
        assert!(fft2d(&vec![0.0; 10]).is_err());
    }

    #[test]
    fn inverse_of_simple_spectra() {
        assert!(ifft2d(&ComplexGrid::zeros(16, 16)).unwrap().iter().all(|&v| v == 0.0));
        let mut dc = ComplexGrid::zeros(16, 16);
        dc.data_mut()[0] = Complex64::new(256.0 * 0.75, 0.0);
        for v in ifft2d(&dc).unwrap() {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_rejects_asymmetric_spectrum() {
        let mut s = ComplexGrid::zeros(8, 8);
        s.data_mut()[1] = Complex64::new(1.0, 0.0);
        assert!(matches!(ifft2d(&s), Err(Error::Numeric(_))));
    }

    #[test]
    fn decompose_examples() {
        let s = ComplexGrid::new(
            1,
            4,
            vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(0.0, 1.0),
                Complex64::new(-2.0, 0.0),
                Complex64::new(0.0, 0.0),
            ],
        )
        .unwrap();
        let (a, p) = decompose(&s);
        assert_eq!(a, vec![1.0, 1.0, 2.0, 0.0]);
        assert_eq!(p, vec![0.0, PI / 2.0, PI, 0.0]);
    }

    #[test]
    fn compose_examples() {
        let s = compose(&[1.0, 2.0], &[0.0, PI / 2.0], 1, 2).unwrap();
        assert_eq!(s.get(0, 0), Complex64::new(1.0, 0.0));
        assert!((s.get(0, 1) - Complex64::new(0.0, 2.0)).norm() < 1e-7);
        assert!(compose(&[-1.0], &[0.0], 1, 1).is_err());
        assert!(compose(&[1.0], &[0.0, 0.0], 1, 1).is_err());
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap(0.0), 0.0);
        assert!((wrap(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap(-5.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!(wrap(PI).abs() <= PI);
    }

    #[test]
    fn overlap_add_examples() {
        let grid = PatchGrid::new(24, 24, 8, 4).unwrap();
        let patches = vec![vec![1.5; 64]; grid.len()];
        assert!(overlap_add(&patches, &grid).unwrap().data().iter().all(|&v| v == 1.5));
        assert!(overlap_add(&patches[1..], &grid).is_err());
    }

    #[test]
    fn overlap_add_averages_two_contributions() {
        let grid = PatchGrid::new(1, 1, 8, 4).unwrap();
        // Four patches cover the single pixel; two carry 0 and two carry 2.
        assert_eq!(grid.count_map(), &[4]);
        let patches: Vec<Patch> = (0..grid.len())
            .map(|q| vec![if q % 2 == 0 { 0.0 } else { 2.0 }; 64])
            .collect();
        assert_eq!(overlap_add(&patches, &grid).unwrap().data(), &[1.0]);
    }
}
