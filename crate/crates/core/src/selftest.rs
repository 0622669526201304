//! Embedded invariant suite behind `specfuse selftest`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::eval::{ap_range, average_precision, iou, match_detections, BBox, Detection, GroundTruth};
use crate::fgsa::{bilinear_sample, deformable_sample, identity_w_k, OffsetField};
use crate::gradcheck::{check_gradient, GradOp, DEFAULT_EPS};
use crate::lfca::{align_phase, blend_amplitude, normalize_amplitude};
use crate::lfgm::{coherence, guidance_vector, DEFAULT_CUTOFF};
use crate::rng::XorShift64Star;
use crate::spectral::{compose, decompose, fft2d, ifft2d, overlap_add, partition, wrap, LocalSpectrum, PatchGrid};
use crate::tensor::{conv2d, ConvSpec, ConvWeights, FeatureMap};

/// Deliberate defects used to confirm the suite detects breakage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the result of the phase wrap.
    WrapSign,
}

impl std::str::FromStr for Fault {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "wrap-sign" => Ok(Self::WrapSign),
            other => Err(crate::Error::InvalidArgument(format!("unknown fault `{other}` (known: wrap-sign)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
    pub passed: usize,
    pub failed: usize,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type Outcome = Result<(), String>;

fn ensure(ok: bool, detail: impl FnOnce() -> String) -> Outcome {
    if ok {
        Ok(())
    } else {
        Err(detail())
    }
}

fn random_patch(rng: &mut XorShift64Star, p: usize) -> Vec<f64> {
    (0..p * p).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn dft_oracle(x: &[f64], p: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); p * p];
    for (k, o) in out.iter_mut().enumerate() {
        let (u, v) = (k / p, k % p);
        for (i, &val) in x.iter().enumerate() {
            let ang = -2.0 * PI * ((u * (i / p) + v * (i % p)) as f64) / p as f64;
            o.0 += val * ang.cos();
            o.1 += val * ang.sin();
        }
    }
    out
}

fn fft_matches_dft() -> Outcome {
    let mut rng = XorShift64Star::new(1);
    for _ in 0..5 {
        let x = random_patch(&mut rng, 8);
        let f = fft2d(&x).map_err(|e| e.to_string())?;
        for (got, want) in f.data().iter().zip(dft_oracle(&x, 8)) {
            let err = (got.re - want.0).hypot(got.im - want.1);
            ensure(err <= 1e-9 * want.0.hypot(want.1).max(1.0), || format!("bin differs by {err}"))?;
        }
    }
    Ok(())
}

fn fft_round_trip() -> Outcome {
    let mut rng = XorShift64Star::new(2);
    let x = random_patch(&mut rng, 16);
    let back = ifft2d(&fft2d(&x).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let err = max_abs_diff(&x, &back);
    ensure(err < 1e-10, || format!("round-trip error {err}"))
}

fn fft_parseval() -> Outcome {
    let mut rng = XorShift64Star::new(3);
    let x = random_patch(&mut rng, 8);
    let f = fft2d(&x).map_err(|e| e.to_string())?;
    let time: f64 = x.iter().map(|v| v * v).sum();
    let freq: f64 = f.data().iter().map(|c| c.norm_sqr()).sum::<f64>() / 64.0;
    ensure(((time - freq) / time).abs() < 1e-10, || format!("energy {time} vs {freq}"))
}

fn decompose_compose() -> Outcome {
    let mut rng = XorShift64Star::new(4);
    let f = fft2d(&random_patch(&mut rng, 8)).map_err(|e| e.to_string())?;
    let (a, p) = decompose(&f);
    let g = compose(&a, &p, 8, 8).map_err(|e| e.to_string())?;
    let err = f.data().iter().zip(g.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).norm()));
    ensure(err < 1e-10, || format!("polar round trip differs by {err}"))
}

fn wrap_bounds(wrap: fn(f64) -> f64) -> Outcome {
    let mut rng = XorShift64Star::new(5);
    for _ in 0..1000 {
        let x = rng.uniform(-50.0, 50.0);
        ensure(wrap(x).abs() <= PI, || format!("wrap({x}) = {} leaves [-π, π]", wrap(x)))?;
    }
    Ok(())
}

fn wrap_congruent(wrap: fn(f64) -> f64) -> Outcome {
    let mut rng = XorShift64Star::new(6);
    for _ in 0..1000 {
        let x = rng.uniform(-50.0, 50.0);
        let k = (x - wrap(x)) / (2.0 * PI);
        ensure((k - k.round()).abs() < 1e-9, || format!("wrap({x}) = {} is not congruent to x mod 2π", wrap(x)))?;
    }
    Ok(())
}

fn wrap_principal(wrap: fn(f64) -> f64) -> Outcome {
    for x in [0.0, 0.5, -1.0, 3.0, -3.0] {
        ensure(wrap(x) == x, || format!("wrap({x}) = {}", wrap(x)))?;
    }
    Ok(())
}

fn normalize_unit_norm() -> Outcome {
    let mut rng = XorShift64Star::new(7);
    let a: Vec<f64> = (0..64).map(|_| rng.uniform(0.0, 3.0)).collect();
    let n = normalize_amplitude(&a, 1e-6).iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure((n - 1.0).abs() < 1e-5, || format!("norm {n}"))?;
    ensure(normalize_amplitude(&[0.0; 4], 1e-6) == vec![0.0; 4], || "zero amplitude not preserved".into())
}

fn blend_convex() -> Outcome {
    let mut rng = XorShift64Star::new(8);
    for _ in 0..100 {
        let r: Vec<f64> = (0..16).map(|_| rng.next_f64()).collect();
        let t: Vec<f64> = (0..16).map(|_| rng.next_f64()).collect();
        let alpha = rng.next_f64();
        let b = blend_amplitude(&r, &t, alpha).map_err(|e| e.to_string())?;
        for ((v, a), c) in b.iter().zip(&r).zip(&t) {
            ensure(*v >= a.min(*c) - 1e-15 && *v <= a.max(*c) + 1e-15, || format!("{v} outside [{a}, {c}]"))?;
        }
    }
    Ok(())
}

fn phase_align_endpoints() -> Outcome {
    let r = [1.0, -2.0, 3.0];
    let t = [0.5, 2.5, -3.0];
    let at0 = align_phase(&r, &t, 0.0).map_err(|e| e.to_string())?;
    let at1 = align_phase(&r, &t, 1.0).map_err(|e| e.to_string())?;
    ensure(max_abs_diff(&at0, &t) < 1e-12, || format!("β=0 gives {at0:?}"))?;
    ensure(max_abs_diff(&at1, &r) < 1e-12, || format!("β=1 gives {at1:?}"))
}

fn overlap_add_identity() -> Outcome {
    let mut rng = XorShift64Star::new(9);
    let map = FeatureMap::from_fn(64, 64, 1, |_, _, _| rng.next_f64() as f32);
    let grid = PatchGrid::new(64, 64, 16, 8).map_err(|e| e.to_string())?;
    let back = overlap_add(&partition(&map, &grid).map_err(|e| e.to_string())?, &grid).map_err(|e| e.to_string())?;
    let err = map.data().iter().zip(back.data()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    ensure(err < 1e-5, || format!("reconstruction error {err}"))
}

fn spectrum(patch: &[f64]) -> Result<LocalSpectrum, String> {
    Ok(LocalSpectrum::new(0, fft2d(patch).map_err(|e| e.to_string())?))
}

fn guidance_bounds() -> Outcome {
    let mut rng = XorShift64Star::new(10);
    for _ in 0..200 {
        let r = spectrum(&random_patch(&mut rng, 8))?;
        let t = spectrum(&random_patch(&mut rng, 8))?;
        let g = guidance_vector(&r, &t, DEFAULT_CUTOFF).map_err(|e| e.to_string())?;
        g.check_bounds().map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn guidance_identity() -> Outcome {
    let mut rng = XorShift64Star::new(11);
    let s = spectrum(&random_patch(&mut rng, 16))?;
    let g = guidance_vector(&s, &s, DEFAULT_CUTOFF).map_err(|e| e.to_string())?.to_array();
    ensure(g == [0.0, 1.0, 0.0, 0.5, 0.5, 1.0], || format!("identical patches give {g:?}"))
}

fn coherence_scale_invariant() -> Outcome {
    let mut rng = XorShift64Star::new(12);
    let x = random_patch(&mut rng, 8);
    let y = random_patch(&mut rng, 8);
    let scaled: Vec<f64> = y.iter().map(|v| 3.7 * v).collect();
    let a = coherence(&fft2d(&x).map_err(|e| e.to_string())?, &fft2d(&y).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let b = coherence(&fft2d(&x).map_err(|e| e.to_string())?, &fft2d(&scaled).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure((0.0..=1.0).contains(&a), || format!("coherence {a}"))?;
    ensure((a - b).abs() < 1e-9, || format!("{a} vs {b} after scaling"))
}

fn deformable_identity() -> Outcome {
    let mut rng = XorShift64Star::new(13);
    let map = FeatureMap::from_fn(9, 11, 3, |_, _, _| rng.uniform(-1.0, 1.0) as f32);
    let w = identity_w_k(9, 3).map_err(|e| e.to_string())?;
    let out = deformable_sample(&map, &OffsetField::zeros(9, 11, 9), &w).map_err(|e| e.to_string())?;
    ensure(out == map, || "zero-offset one-hot sampling changed the map".into())
}

fn bilinear_affine() -> Outcome {
    let map = FeatureMap::from_fn(10, 10, 1, |y, x, _| 0.25 * x as f32 - 0.5 * y as f32 + 1.0);
    for (x, y) in [(2.25, 3.5), (7.75, 1.125), (4.5, 8.5)] {
        let got = bilinear_sample(&map, x, y)[0];
        let want = 0.25 * x - 0.5 * y + 1.0;
        ensure((got - want).abs() < 1e-6, || format!("plane at ({x}, {y}): {got} vs {want}"))?;
    }
    Ok(())
}

fn conv_identity() -> Outcome {
    let mut rng = XorShift64Star::new(14);
    let map = FeatureMap::from_fn(7, 6, 2, |_, _, _| rng.next_f64() as f32);
    let mut k = ConvWeights::zeros(3, 3, 2, 2);
    for c in 0..2 {
        let i = k.index(1, 1, c, c);
        k.weights[i] = 1.0;
    }
    let out = conv2d(&map, &k, ConvSpec::default()).map_err(|e| e.to_string())?;
    ensure(out == map, || "centre-tap kernel is not the identity".into())
}

fn boxed(x: f64, y: f64, w: f64, h: f64) -> Result<BBox, String> {
    BBox::new(x, y, w, h).map_err(|e| e.to_string())
}

fn iou_examples() -> Outcome {
    let a = boxed(0.0, 0.0, 2.0, 2.0)?;
    ensure(iou(&a, &a) == 1.0, || "self IoU".into())?;
    ensure(iou(&a, &boxed(5.0, 5.0, 1.0, 1.0)?) == 0.0, || "disjoint IoU".into())?;
    let v = iou(&a, &boxed(1.0, 0.0, 2.0, 2.0)?);
    ensure(v == 1.0 / 3.0, || format!("half-overlap IoU {v}"))
}

fn match_injective() -> Outcome {
    let g = boxed(0.0, 0.0, 4.0, 4.0)?;
    let dets: Vec<Detection> = (0..4)
        .map(|i| Detection { image_id: "a".into(), bbox: g, score: 0.2 * i as f64 })
        .collect();
    let m = match_detections(&dets, &[GroundTruth { image_id: "a".into(), bbox: g }], 0.5).map_err(|e| e.to_string())?;
    ensure((m.tp, m.fp, m.fn_) == (1, 3, 0), || format!("TP/FP/FN = {:?}", (m.tp, m.fp, m.fn_)))?;
    ensure(m.assigned == vec![Some(3)], || "highest-score detection should take the box".into())
}

fn ap_single_tp() -> Outcome {
    ensure(average_precision(&[true], 1) == 1.0, || "single TP".into())?;
    ensure(average_precision(&[false, false], 2) == 0.0, || "all FP".into())
}

fn ap_five_sixths() -> Outcome {
    let ap = average_precision(&[true, false, true], 2);
    ensure((ap - 5.0 / 6.0).abs() < 1e-12, || format!("AP {ap}"))
}

fn ap_range_mean() -> Outcome {
    let gts: Vec<GroundTruth> = (0..2)
        .map(|i| Ok(GroundTruth { image_id: i.to_string(), bbox: boxed(0.0, 0.0, 10.0, 10.0)? }))
        .collect::<Result<_, String>>()?;
    let dets: Vec<Detection> = gts
        .iter()
        .map(|g| Ok(Detection { image_id: g.image_id.clone(), bbox: boxed(0.0, 0.0, 6.0, 10.0)?, score: 0.5 }))
        .collect::<Result<_, String>>()?;
    let r = ap_range(&dets, &gts).map_err(|e| e.to_string())?;
    let mean = r.per_threshold.iter().map(|t| t.ap).sum::<f64>() / 10.0;
    ensure(r.ap_50_95 == mean, || "AP(0.5:0.95) differs from the mean".into())?;
    ensure((mean - 0.3).abs() < 1e-15, || format!("mean {mean}"))
}

fn gradients(op: GradOp) -> Outcome {
    let r = check_gradient(op, 5, 99, DEFAULT_EPS).map_err(|e| e.to_string())?;
    ensure(r.passed, || format!("max relative error {}", r.max_rel_error))
}

/// Runs every check; `fault` injects a defect for testing the suite itself.
pub fn run(fault: Option<Fault>) -> SelftestReport {
    let wrap_fn: fn(f64) -> f64 = match fault {
        Some(Fault::WrapSign) => |x| -wrap(x),
        None => wrap,
    };
    let checks: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("fft_matches_dft", Box::new(fft_matches_dft)),
        ("fft_round_trip", Box::new(fft_round_trip)),
        ("fft_parseval", Box::new(fft_parseval)),
        ("decompose_compose_round_trip", Box::new(decompose_compose)),
        ("wrap_bounds", Box::new(move || wrap_bounds(wrap_fn))),
        ("wrap_congruent_mod_2pi", Box::new(move || wrap_congruent(wrap_fn))),
        ("wrap_principal_identity", Box::new(move || wrap_principal(wrap_fn))),
        ("normalize_unit_norm", Box::new(normalize_unit_norm)),
        ("blend_convexity", Box::new(blend_convex)),
        ("phase_align_endpoints", Box::new(phase_align_endpoints)),
        ("overlap_add_identity", Box::new(overlap_add_identity)),
        ("guidance_bounds", Box::new(guidance_bounds)),
        ("guidance_identical_patch", Box::new(guidance_identity)),
        ("coherence_bounds_and_scale_invariance", Box::new(coherence_scale_invariant)),
        ("deformable_identity", Box::new(deformable_identity)),
        ("bilinear_affine_exact", Box::new(bilinear_affine)),
        ("conv_identity", Box::new(conv_identity)),
        ("iou_examples", Box::new(iou_examples)),
        ("match_injective", Box::new(match_injective)),
        ("ap_single_tp_and_all_fp", Box::new(ap_single_tp)),
        ("ap_tp_fp_tp_oracle", Box::new(ap_five_sixths)),
        ("ap_range_mean", Box::new(ap_range_mean)),
        ("gradient_blend_alpha", Box::new(|| gradients(GradOp::BlendAlpha))),
        ("gradient_phase_beta", Box::new(|| gradients(GradOp::PhaseBeta))),
        ("gradient_gate_weights", Box::new(|| gradients(GradOp::GateWeights))),
        ("gradient_bilinear_coords", Box::new(|| gradients(GradOp::BilinearCoords))),
        ("gradient_conv_weights", Box::new(|| gradients(GradOp::ConvWeights))),
    ];
    let checks: Vec<CheckResult> = checks
        .into_iter()
        .map(|(name, f)| {
            let outcome = f();
            CheckResult {
                name: name.to_string(),
                passed: outcome.is_ok(),
                detail: outcome.err().unwrap_or_default(),
            }
        })
        .collect();
    let failed = checks.iter().filter(|c| !c.passed).count();
    SelftestReport {
        passed: checks.len() - failed,
        failed,
        checks,
    }
}
