//! Finite-difference verification of the analytic gradients of the learnable
//! operators.
//!
//! Each check draws a random input, reduces the operator output to a scalar
//! with a random projection, and compares the analytic gradient of that
//! scalar with central differences.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgsa::{bilinear_grad_raw, bilinear_sample_raw};
use crate::lfca::{align_phase, align_phase_grad_beta, blend_amplitude, blend_amplitude_grad_alpha, normalize_amplitude};
use crate::rng::XorShift64Star;
use crate::spectral::{decompose, fft2d};
use crate::tensor::{conv2d_backward_weights, conv2d_raw, sigmoid, ConvGeometry, ConvSpec};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Tolerance for points within two step sizes of a bilinear cell boundary.
pub const KINK_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_POINTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradOp {
    BlendAlpha,
    PhaseBeta,
    GateWeights,
    BilinearCoords,
    ConvWeights,
}

impl GradOp {
    pub const ALL: [GradOp; 5] = [Self::BlendAlpha, Self::PhaseBeta, Self::GateWeights, Self::BilinearCoords, Self::ConvWeights];

    pub fn name(self) -> &'static str {
        match self {
            Self::BlendAlpha => "blend_alpha",
            Self::PhaseBeta => "phase_beta",
            Self::GateWeights => "gate_weights",
            Self::BilinearCoords => "bilinear_coords",
            Self::ConvWeights => "conv_weights",
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|op| op.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|op| op.name()).collect();
            Error::InvalidArgument(format!("no analytic gradient for `{s}`; supported ops: {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub op: GradOp,
    pub points: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub kink_tolerance: f64,
    pub kink_points: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub per_parameter: Vec<ParamError>,
    pub passed: bool,
}

/// `σ(x)(1 − σ(x))`.
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

struct Sample {
    names: Vec<String>,
    analytic: Vec<f64>,
    numeric: Vec<f64>,
    near_kink: bool,
}

fn central(loss: impl Fn(&[f64]) -> f64, theta: &[f64], eps: f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            t[i] = theta[i] + eps;
            let up = loss(&t);
            t[i] = theta[i] - eps;
            let down = loss(&t);
            t[i] = theta[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_vec(rng: &mut XorShift64Star, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

fn random_spectrum(rng: &mut XorShift64Star, p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let patch = random_vec(rng, p * p, 0.0, 1.0);
    Ok(decompose(&fft2d(&patch)?))
}

fn blend_alpha(rng: &mut XorShift64Star, eps: f64) -> Result<Sample> {
    let (ar, _) = random_spectrum(rng, 8)?;
    let (at, _) = random_spectrum(rng, 8)?;
    let (r, t) = (normalize_amplitude(&ar, 1e-6), normalize_amplitude(&at, 1e-6));
    let c = random_vec(rng, r.len(), -1.0, 1.0);
    let alpha = rng.uniform(0.05, 0.95);
    let loss = |th: &[f64]| dot(&c, &blend_amplitude(&r, &t, th[0]).expect("alpha stays in range"));
    Ok(Sample {
        names: vec!["alpha".into()],
        analytic: vec![dot(&c, &blend_amplitude_grad_alpha(&r, &t))],
        numeric: central(loss, &[alpha], eps),
        near_kink: false,
    })
}

fn phase_beta(rng: &mut XorShift64Star, eps: f64) -> Result<Sample> {
    let (_, pr) = random_spectrum(rng, 8)?;
    let (_, pt) = random_spectrum(rng, 8)?;
    let c = random_vec(rng, pr.len(), -1.0, 1.0);
    let d = random_vec(rng, pr.len(), -1.0, 1.0);
    let beta = rng.uniform(0.05, 0.95);
    // cos/sin read the aligned phase on the circle, so the loss stays smooth
    // where the phase wraps.
    let loss = |th: &[f64]| {
        let phi = align_phase(&pr, &pt, th[0]).expect("beta stays in range");
        phi.iter().zip(c.iter().zip(&d)).map(|(p, (c, d))| c * p.cos() + d * p.sin()).sum::<f64>()
    };
    let phi = align_phase(&pr, &pt, beta)?;
    let dphi = align_phase_grad_beta(&pr, &pt);
    let analytic = phi
        .iter()
        .zip(&dphi)
        .zip(c.iter().zip(&d))
        .map(|((p, dp), (c, d))| (-c * p.sin() + d * p.cos()) * dp)
        .sum();
    Ok(Sample {
        names: vec!["beta".into()],
        analytic: vec![analytic],
        numeric: central(loss, &[beta], eps),
        near_kink: false,
    })
}

fn gate_weights(rng: &mut XorShift64Star, eps: f64) -> Result<Sample> {
    let (h, w, cin, cout) = (5, 6, 4, 6);
    let x = random_vec(rng, h * w * cin, -1.0, 1.0);
    let g = random_vec(rng, h * w * cout, 0.0, 1.0);
    let c = random_vec(rng, h * w * cout, -1.0, 1.0);
    let n_w = cin * cout;
    let theta = random_vec(rng, n_w + cout, -0.5, 0.5);
    let geom = ConvGeometry { height: h, width: w, kh: 1, kw: 1, spec: ConvSpec::default() };
    let logits = |th: &[f64]| conv2d_raw(&x, cin, &th[..n_w], Some(&th[n_w..]), cout, geom).expect("valid geometry");
    let loss = |th: &[f64]| {
        let z = logits(th);
        z.iter().zip(&g).zip(&c).map(|((z, g), c)| c * sigmoid(*z) * g).sum::<f64>()
    };
    let z = logits(&theta);
    let dz: Vec<f64> = z.iter().zip(&g).zip(&c).map(|((z, g), c)| c * g * sigmoid_grad(*z)).collect();
    let (gw, gb) = conv2d_backward_weights(&x, cin, &dz, cout, geom)?;
    let mut names = vec!["gate_conv.weight".to_string(); n_w];
    names.extend(vec!["gate_conv.bias".to_string(); cout]);
    Ok(Sample {
        names,
        analytic: gw.into_iter().chain(gb).collect(),
        numeric: central(loss, &theta, eps),
        near_kink: false,
    })
}

fn bilinear_coords(rng: &mut XorShift64Star, eps: f64) -> Result<Sample> {
    let (h, w, ch) = (8, 8, 3);
    let freqs: Vec<(f64, f64, f64)> = (0..ch).map(|_| (rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9), rng.uniform(0.0, 6.0))).collect();
    let map: Vec<f64> = (0..h * w * ch)
        .map(|i| {
            let (y, x, k) = ((i / ch) / w, (i / ch) % w, i % ch);
            let (fy, fx, ph) = freqs[k];
            (fy * y as f64 + fx * x as f64 + ph).sin()
        })
        .collect();
    let c = random_vec(rng, ch, -1.0, 1.0);
    let theta = [rng.uniform(1.0, w as f64 - 2.0), rng.uniform(1.0, h as f64 - 2.0)];
    let loss = |th: &[f64]| {
        let mut out = vec![0.0; ch];
        bilinear_sample_raw(&map, h, w, ch, th[0], th[1], &mut out);
        dot(&c, &out)
    };
    let (gx, gy) = bilinear_grad_raw(&map, h, w, ch, theta[0], theta[1]);
    // The interpolant is linear inside a cell; next to a cell edge the
    // difference is taken on the side the analytic gradient describes.
    let mut near_kink = false;
    let mut numeric = Vec::with_capacity(2);
    for i in 0..2 {
        let frac = theta[i] - theta[i].floor();
        let (lo, hi) = if frac < 2.0 * eps {
            near_kink = true;
            (0.0, eps)
        } else if frac > 1.0 - 2.0 * eps {
            near_kink = true;
            (-eps, 0.0)
        } else {
            (-eps, eps)
        };
        let mut t = theta;
        t[i] = theta[i] + hi;
        let up = loss(&t);
        t[i] = theta[i] + lo;
        numeric.push((up - loss(&t)) / (hi - lo));
    }
    Ok(Sample {
        names: vec!["x".into(), "y".into()],
        analytic: vec![dot(&c, &gx), dot(&c, &gy)],
        numeric,
        near_kink,
    })
}

fn conv_weights(rng: &mut XorShift64Star, eps: f64) -> Result<Sample> {
    let (h, w, cin, cout) = (6, 7, 2, 3);
    let x = random_vec(rng, h * w * cin, -1.0, 1.0);
    let c = random_vec(rng, h * w * cout, -1.0, 1.0);
    let n_w = 9 * cin * cout;
    let theta = random_vec(rng, n_w + cout, -0.5, 0.5);
    let geom = ConvGeometry { height: h, width: w, kh: 3, kw: 3, spec: ConvSpec::default() };
    let loss = |th: &[f64]| dot(&c, &conv2d_raw(&x, cin, &th[..n_w], Some(&th[n_w..]), cout, geom).expect("valid geometry"));
    let (gw, gb) = conv2d_backward_weights(&x, cin, &c, cout, geom)?;
    let mut names = vec!["conv.weight".to_string(); n_w];
    names.extend(vec!["conv.bias".to_string(); cout]);
    Ok(Sample {
        names,
        analytic: gw.into_iter().chain(gb).collect(),
        numeric: central(loss, &theta, eps),
        near_kink: false,
    })
}

/// Compares analytic and central-difference gradients of `op` at `points`
/// random inputs drawn from `seed`.
pub fn check_gradient(op: GradOp, points: usize, seed: u64, eps: f64) -> Result<GradReport> {
    if !(eps > 0.0 && eps < 0.1) {
        return Err(Error::InvalidArgument(format!("finite-difference step must lie in (0, 0.1), got {eps}")));
    }
    if points == 0 {
        return Err(Error::InvalidArgument("gradient check needs at least one point".into()));
    }
    let mut rng = XorShift64Star::new(seed);
    let mut per_param: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    let (mut max_all, mut sum_all, mut n_all) = (0.0f64, 0.0, 0usize);
    let mut kink_points = 0;
    let mut passed = true;
    for _ in 0..points {
        let sample = match op {
            GradOp::BlendAlpha => blend_alpha(&mut rng, eps)?,
            GradOp::PhaseBeta => phase_beta(&mut rng, eps)?,
            GradOp::GateWeights => gate_weights(&mut rng, eps)?,
            GradOp::BilinearCoords => bilinear_coords(&mut rng, eps)?,
            GradOp::ConvWeights => conv_weights(&mut rng, eps)?,
        };
        let tol = if sample.near_kink { KINK_TOLERANCE } else { TOLERANCE };
        kink_points += sample.near_kink as usize;
        for ((name, a), n) in sample.names.iter().zip(&sample.analytic).zip(&sample.numeric) {
            let e = relative_error(*a, *n);
            if !(e <= tol) {
                passed = false;
            }
            let entry = per_param.entry(name.clone()).or_insert((0.0, 0.0, 0));
            entry.0 = entry.0.max(e);
            entry.1 += e;
            entry.2 += 1;
            max_all = max_all.max(e);
            sum_all += e;
            n_all += 1;
        }
    }
    Ok(GradReport {
        op,
        points,
        eps,
        tolerance: TOLERANCE,
        kink_tolerance: KINK_TOLERANCE,
        kink_points,
        max_rel_error: max_all,
        mean_rel_error: sum_all / n_all.max(1) as f64,
        per_parameter: per_param
            .into_iter()
            .map(|(name, (max, sum, count))| ParamError {
                name,
                max_rel_error: max,
                mean_rel_error: sum / count as f64,
                count,
            })
            .collect(),
        passed,
    })
}

/// Runs [`check_gradient`] for every supported operator.
pub fn check_all(points: usize, seed: u64, eps: f64) -> Result<Vec<GradReport>> {
    GradOp::ALL
        .iter()
        .enumerate()
        .map(|(i, &op)| check_gradient(op, points, seed.wrapping_add(i as u64), eps))
        .collect()
}
