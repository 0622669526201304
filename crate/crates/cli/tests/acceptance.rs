//! Acceptance suite. Prints one pass/fail line per criterion and fails at the
//! end if any criterion failed. Criteria run one after another so the timed
//! ones are not competing for cores.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use specfuse_core::eval::{self, average_precision, iou, match_detections, BBox, Detection, GroundTruth};
use specfuse_core::fgsa::{base_lattice, bilinear_sample_raw, deformable_sample, identity_w_k, OffsetField};
use specfuse_core::gradcheck;
use specfuse_core::lfca::{align_phase, blend_amplitude, normalize_amplitude};
use specfuse_core::lfgm::{coherence, guidance_vector, project_guidance, GuidanceVector};
use specfuse_core::rng::XorShift64Star;
use specfuse_core::spectral::{overlap_add, partition, wrap, Fft2d, LocalSpectrum, PatchGrid};
use specfuse_core::synth::{self, SynthConfig};
use specfuse_core::tensor::{ComplexGrid, FeatureMap};
use specfuse_core::{backbone, Config};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit_s,
        format!("took {:.2} s, budget {limit_s} s", elapsed.as_secs_f64()),
    )
}

fn random_patch(rng: &mut XorShift64Star, p: usize) -> Vec<f64> {
    (0..p * p).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn spectrum(fft: &Fft2d, patch: &[f64]) -> LocalSpectrum {
    LocalSpectrum::new(0, fft.forward(patch).unwrap())
}

fn dft_oracle(x: &[f64], p: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(p * p);
    for u in 0..p {
        for v in 0..p {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..p {
                for xx in 0..p {
                    let t = -2.0 * PI * ((u * y) as f64 / p as f64 + (v * xx) as f64 / p as f64);
                    re += x[y * p + xx] * t.cos();
                    im += x[y * p + xx] * t.sin();
                }
            }
            out.push((re, im));
        }
    }
    out
}

fn spectral_correctness() -> Check {
    let start = Instant::now();
    let p = 8;
    let fft = Fft2d::new(p).map_err(|e| e.to_string())?;
    let mut rng = XorShift64Star::new(1);
    let (mut worst_dft, mut worst_rt, mut worst_parseval) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = random_patch(&mut rng, p);
        let spec = fft.forward(&x).map_err(|e| e.to_string())?;
        let oracle = dft_oracle(&x, p);
        let scale = oracle.iter().map(|&(re, im)| re.hypot(im)).fold(0.0, f64::max);
        for (z, &(re, im)) in spec.data().iter().zip(&oracle) {
            worst_dft = worst_dft.max((z.re - re).hypot(z.im - im) / scale);
        }
        let back = fft.inverse(&spec, 1e-9).map_err(|e| e.to_string())?;
        for (a, b) in back.iter().zip(&x) {
            worst_rt = worst_rt.max((a - b).abs());
        }
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spec_energy: f64 = spec.data().iter().map(|z| z.norm_sqr()).sum::<f64>() / (p * p) as f64;
        worst_parseval = worst_parseval.max((energy - spec_energy).abs() / energy);
    }
    ensure(worst_dft < 1e-5, format!("DFT mismatch {worst_dft:.2e}"))?;
    ensure(worst_rt < 1e-5, format!("round trip error {worst_rt:.2e}"))?;
    ensure(worst_parseval < 1e-4, format!("Parseval error {worst_parseval:.2e}"))?;
    within_budget(start.elapsed(), 5.0)?;
    Ok(format!(
        "dft {worst_dft:.1e}, round trip {worst_rt:.1e}, parseval {worst_parseval:.1e}, {:.2} s",
        start.elapsed().as_secs_f64()
    ))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn amplitude_phase_suite() -> Check {
    let start = Instant::now();
    let eps = 1e-6;
    let mut rng = XorShift64Star::new(2);
    let p = 16;

    let unit: Vec<f64> = {
        let raw: Vec<f64> = (0..p * p).map(|_| rng.uniform(0.0, 1.0)).collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.iter().map(|v| v / n).collect()
    };
    ensure(max_diff(&normalize_amplitude(&unit, eps), &unit) < 1e-5, "normalize: unit-norm input changed")?;
    let doubled: Vec<f64> = unit.iter().map(|v| 2.0 * v).collect();
    ensure(max_diff(&normalize_amplitude(&doubled, eps), &unit) < 1e-5, "normalize: scale not removed")?;
    ensure(normalize_amplitude(&vec![0.0; p * p], eps).iter().all(|&v| v == 0.0), "normalize: zero input")?;

    let ar: Vec<f64> = (0..p * p).map(|_| rng.uniform(0.0, 0.1)).collect();
    let at: Vec<f64> = (0..p * p).map(|_| rng.uniform(0.0, 0.1)).collect();
    let blend = |a: f64| blend_amplitude(&ar, &at, a).map_err(|e| e.to_string());
    ensure(blend(1.0)? == ar, "blend: alpha=1 is not the RGB amplitude")?;
    ensure(blend(0.0)? == at, "blend: alpha=0 is not the thermal amplitude")?;
    let fixed = blend_amplitude(&ar, &ar, 0.37).map_err(|e| e.to_string())?;
    ensure(max_diff(&fixed, &ar) < 1e-15, "blend: equal inputs are not a fixed point")?;

    let pr: Vec<f64> = (0..p * p).map(|_| rng.uniform(-PI, PI)).collect();
    let pt: Vec<f64> = (0..p * p).map(|_| rng.uniform(-PI, PI)).collect();
    let align = |r: &[f64], t: &[f64], b: f64| align_phase(r, t, b).map_err(|e| e.to_string());
    ensure(max_diff(&align(&pr, &pt, 0.0)?, &pt) < 1e-15, "align: beta=0 is not the thermal phase")?;
    ensure(max_diff(&align(&pt, &pt, 0.8)?, &pt) < 1e-15, "align: equal phases moved")?;
    let quarter = align(&[PI / 2.0], &[0.0], 0.5)?;
    ensure((quarter[0] - PI / 4.0).abs() < 1e-15, format!("align: expected pi/4, got {}", quarter[0]))?;

    let mut worst_convexity = 0.0f64;
    let mut worst_distance = 0.0f64;
    for _ in 0..1000 {
        let ar = normalize_amplitude(&(0..p * p).map(|_| rng.uniform(0.0, 5.0)).collect::<Vec<_>>(), eps);
        let at = normalize_amplitude(&(0..p * p).map(|_| rng.uniform(0.0, 5.0)).collect::<Vec<_>>(), eps);
        let alpha = rng.next_f64();
        let out = blend_amplitude(&ar, &at, alpha).map_err(|e| e.to_string())?;
        for ((o, a), b) in out.iter().zip(&ar).zip(&at) {
            let excess = (a.min(*b) - o).max(o - a.max(*b)).max(0.0);
            worst_convexity = worst_convexity.max(excess);
        }

        let pr: Vec<f64> = (0..p * p).map(|_| rng.uniform(-PI, PI)).collect();
        let pt: Vec<f64> = (0..p * p).map(|_| rng.uniform(-PI, PI)).collect();
        let beta = rng.next_f64();
        let pa = align(&pr, &pt, beta)?;
        for ((a, r), t) in pa.iter().zip(&pr).zip(&pt) {
            let moved = wrap(a - t).abs();
            let expected = beta * wrap(r - t).abs();
            worst_distance = worst_distance.max((moved - expected).abs());
        }
    }
    ensure(worst_convexity <= 1e-15, format!("blend leaves its input range by {worst_convexity:.2e}"))?;
    ensure(worst_distance < 1e-6, format!("phase interpolation distance off by {worst_distance:.2e}"))?;
    within_budget(start.elapsed(), 5.0)?;
    Ok(format!(
        "examples pass; convexity excess {worst_convexity:.1e}, distance error {worst_distance:.1e}, {:.2} s",
        start.elapsed().as_secs_f64()
    ))
}

/// Mean of every covering patch's contribution, accumulated pixel by pixel.
fn accumulate_oracle(grid: &PatchGrid, value: impl Fn(usize, usize, usize) -> f64) -> Vec<f64> {
    let (h, w, p) = (grid.height(), grid.width(), grid.patch_size());
    let mut sum = vec![0.0; h * w];
    let mut count = vec![0usize; h * w];
    for q in 0..grid.len() {
        let (oy, ox) = grid.origin(q);
        for dy in 0..p {
            for dx in 0..p {
                let (y, x) = (oy + dy as isize, ox + dx as isize);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let i = y as usize * w + x as usize;
                sum[i] += value(q, dy, dx);
                count[i] += 1;
            }
        }
    }
    sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect()
}

fn overlap_add_identity() -> Check {
    let mut rng = XorShift64Star::new(3);
    let map = FeatureMap::from_fn(64, 64, 1, |_, _, _| rng.uniform(-2.0, 2.0) as f32);
    let grid = PatchGrid::new(64, 64, 16, 8).map_err(|e| e.to_string())?;
    let patches = partition(&map, &grid).map_err(|e| e.to_string())?;
    let back = overlap_add(&patches, &grid).map_err(|e| e.to_string())?;
    let recon = back.data().iter().zip(map.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    ensure(recon < 1e-5, format!("overlap-add reconstruction error {recon:.2e}"))?;

    let mut worst_guidance = 0.0f64;
    for size in [32, 64] {
        let grid = PatchGrid::new(size, size, 16, 8).map_err(|e| e.to_string())?;
        let vectors: Vec<GuidanceVector> = (0..grid.len())
            .map(|_| GuidanceVector {
                d_x: rng.uniform(-0.7, 0.7),
                d_y: rng.uniform(-0.7, 0.7),
                s_phi: rng.uniform(0.0, PI),
                c_hf: rng.next_f64(),
                c_lf: rng.next_f64(),
                coh: rng.next_f64(),
            })
            .collect();
        let projected = project_guidance(&vectors, &grid).map_err(|e| e.to_string())?;
        let map = projected.as_map();
        for c in 0..6 {
            let oracle = accumulate_oracle(&grid, |q, _, _| vectors[q].to_array()[c]);
            for (i, o) in oracle.iter().enumerate() {
                worst_guidance = worst_guidance.max((map.data()[i * 6 + c] as f64 - o).abs());
            }
        }
    }
    ensure(worst_guidance < 1e-6, format!("guidance projection error {worst_guidance:.2e}"))?;
    Ok(format!("reconstruction {recon:.1e}, guidance projection {worst_guidance:.1e}"))
}

fn scaled(spec: &ComplexGrid, c: f64) -> ComplexGrid {
    ComplexGrid::new(spec.height(), spec.width(), spec.data().iter().map(|z| z * c).collect()).unwrap()
}

fn guidance_suite() -> Check {
    let p = 16;
    let cutoff = Config::default().cutoff_rho;
    let fft = Fft2d::new(p).map_err(|e| e.to_string())?;
    let mut rng = XorShift64Star::new(4);
    for i in 0..1000 {
        let r = spectrum(&fft, &random_patch(&mut rng, p));
        let t = spectrum(&fft, &random_patch(&mut rng, p));
        let g = guidance_vector(&r, &t, cutoff).map_err(|e| e.to_string())?;
        let ok = g.d_x * g.d_x + g.d_y * g.d_y <= 1.0
            && (0.0..=PI).contains(&g.s_phi)
            && [g.c_hf, g.c_lf, g.coh].iter().all(|v| (0.0..=1.0).contains(v));
        ensure(ok, format!("pair {i}: out-of-range guidance {g:?}"))?;
    }

    let s = spectrum(&fft, &random_patch(&mut rng, p));
    let g = guidance_vector(&s, &s, cutoff).map_err(|e| e.to_string())?;
    ensure(
        g.to_array() == [0.0, 1.0, 0.0, 0.5, 0.5, 1.0],
        format!("identical patch gives {:?}", g.to_array()),
    )?;

    let mut worst_scale = 0.0f64;
    for _ in 0..100 {
        let r = fft.forward(&random_patch(&mut rng, p)).map_err(|e| e.to_string())?;
        let t = fft.forward(&random_patch(&mut rng, p)).map_err(|e| e.to_string())?;
        let base = coherence(&r, &t).map_err(|e| e.to_string())?;
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let v = coherence(&r, &scaled(&t, c)).map_err(|e| e.to_string())?;
            worst_scale = worst_scale.max((v - base).abs());
        }
    }
    ensure(worst_scale < 1e-6, format!("coherence changes by {worst_scale:.2e} under scaling"))?;
    Ok(format!("bounds hold on 1000 pairs, identity exact, scale drift {worst_scale:.1e}"))
}

fn sampling_suite() -> Check {
    let mut rng = XorShift64Star::new(5);
    let (h, w, c) = (20, 24, 3);
    let map = FeatureMap::from_fn(h, w, c, |_, _, _| rng.uniform(-1.0, 1.0) as f32);
    let zero = OffsetField::zeros(h, w, 9);
    let ident = deformable_sample(&map, &zero, &identity_w_k(9, c).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(ident.data() == map.data(), "zero-offset one-hot sampling is not the identity")?;

    let blurred = deformable_sample(&map, &zero, &vec![1.0 / 9.0; 9 * c]).map_err(|e| e.to_string())?;
    let lattice = base_lattice(9).map_err(|e| e.to_string())?;
    ensure(lattice.len() == 9, "lattice size")?;
    let mut worst_blur = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            acc += map.get(yy as usize, xx as usize, ch) as f64;
                        }
                    }
                }
                worst_blur = worst_blur.max((blurred.get(y, x, ch) as f64 - acc / 9.0).abs());
            }
        }
    }
    ensure(worst_blur < 1e-6, format!("box blur error {worst_blur:.2e}"))?;

    let (ph, pw) = (16, 16);
    let mut worst_plane = 0.0f64;
    for _ in 0..50 {
        let (a, b, k) = (rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-5.0, 5.0));
        let plane: Vec<f64> = (0..ph * pw).map(|i| a * (i % pw) as f64 + b * (i / pw) as f64 + k).collect();
        for _ in 0..20 {
            let x = rng.uniform(0.0, (pw - 1) as f64);
            let y = rng.uniform(0.0, (ph - 1) as f64);
            let mut out = [0.0f64];
            bilinear_sample_raw(&plane, ph, pw, 1, x, y, &mut out);
            worst_plane = worst_plane.max((out[0] - (a * x + b * y + k)).abs());
        }
    }
    ensure(worst_plane < 1e-12, format!("affine plane error {worst_plane:.2e}"))?;
    Ok(format!("identity exact, blur {worst_blur:.1e}, planes {worst_plane:.1e}"))
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let reports = gradcheck::check_all(gradcheck::DEFAULT_POINTS, 0, gradcheck::DEFAULT_EPS).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for r in &reports {
        ensure(r.points == 20, format!("{} checked {} points", r.op.name(), r.points))?;
        ensure(
            r.passed,
            format!("{} max relative error {:.2e} ({} near kinks)", r.op.name(), r.max_rel_error, r.kink_points),
        )?;
        summary.push(format!("{} {:.1e}", r.op.name(), r.max_rel_error));
    }
    within_budget(start.elapsed(), 30.0)?;
    Ok(format!("{}, {:.2} s", summary.join(", "), start.elapsed().as_secs_f64()))
}

fn oracle_alignment() -> Check {
    let start = Instant::now();
    let cfg = SynthConfig { shift: (2.0, 0.0), noise_sigma: 0.0, ..SynthConfig::default() };
    ensure((cfg.height, cfg.width) == (128, 128), "benchmark size")?;
    let pair = synth::generate_pair(&cfg).map_err(|e| e.to_string())?;
    let luma = backbone::luma(&pair.rgb).map_err(|e| e.to_string())?;
    let mask = synth::interior_mask(128, 128, 4);
    let w_k = identity_w_k(9, 1).map_err(|e| e.to_string())?;
    let warp = |offsets: &OffsetField| deformable_sample(&pair.thermal, offsets, &w_k).map_err(|e| e.to_string());
    let zero = synth::alignment_error(&warp(&OffsetField::zeros(128, 128, 9))?, &luma, &mask).map_err(|e| e.to_string())?;
    let oracle = synth::alignment_error(&warp(&OffsetField::uniform(128, 128, 9, 2.0, 0.0))?, &luma, &mask)
        .map_err(|e| e.to_string())?;
    let reduction = 1.0 - oracle / zero;
    ensure(zero > 0.0, "zero-offset error is already 0")?;
    ensure(reduction >= 0.9, format!("reduction {:.1}%", 100.0 * reduction))?;
    within_budget(start.elapsed(), 10.0)?;
    Ok(format!(
        "error {zero:.4} -> {oracle:.2e}, reduction {:.1}%, {:.2} s",
        100.0 * reduction,
        start.elapsed().as_secs_f64()
    ))
}

fn bbox(x: f64, y: f64, w: f64, h: f64) -> BBox {
    BBox::new(x, y, w, h).unwrap()
}

fn det(img: &str, b: BBox, score: f64) -> Detection {
    Detection { image_id: img.into(), bbox: b, score }
}

fn gt(img: &str, b: BBox) -> GroundTruth {
    GroundTruth { image_id: img.into(), bbox: b }
}

/// Area under the PR curve by enumerating every score cutoff.
fn brute_ap(flags: &[bool], total_gts: usize) -> f64 {
    let n = flags.len();
    let points: Vec<(f64, f64)> = (1..=n)
        .map(|k| {
            let tp = flags[..k].iter().filter(|&&f| f).count() as f64;
            (tp / k as f64, tp / total_gts as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        let recall = points[k].1;
        if recall > prev_recall {
            let best = points[k..].iter().map(|p| p.0).fold(0.0, f64::max);
            ap += (recall - prev_recall) * best;
            prev_recall = recall;
        }
    }
    ap
}

fn evaluation_suite() -> Check {
    let e = |r: specfuse_core::Result<eval::MatchResult>| r.map_err(|e| e.to_string());
    let a = bbox(0.0, 0.0, 2.0, 2.0);
    ensure(iou(&a, &a) == 1.0, "iou: identical boxes")?;
    ensure(iou(&a, &bbox(5.0, 5.0, 1.0, 1.0)) == 0.0, "iou: disjoint boxes")?;
    ensure(iou(&a, &bbox(1.0, 0.0, 2.0, 2.0)) == 1.0 / 3.0, "iou: expected 1/3")?;

    let m = e(match_detections(&[det("a", a, 0.9)], &[gt("a", a)], 0.5))?;
    ensure((m.tp, m.fp, m.fn_) == (1, 0, 0), "match: single exact detection")?;
    let m = e(match_detections(&[], &[gt("a", a)], 0.5))?;
    ensure((m.tp, m.fp, m.fn_) == (0, 0, 1), "match: no detections")?;
    let m = e(match_detections(&[det("a", a, 0.4), det("a", bbox(0.1, 0.0, 2.0, 2.0), 0.8)], &[gt("a", a)], 0.5))?;
    ensure(m.flags == [true, false] && m.order == [1, 0], "match: higher score must win")?;

    ensure(average_precision(&[true], 1) == 1.0, "ap: single TP")?;
    ensure(average_precision(&[false, false, false], 2) == 0.0, "ap: all FP")?;
    let flags = [true, false, true];
    let ap = average_precision(&flags, 2);
    let oracle = brute_ap(&flags, 2);
    ensure(
        (ap - 5.0 / 6.0).abs() < 1e-9 && (ap - oracle).abs() < 1e-9,
        format!("ap: [TP,FP,TP]/2 gave {ap}, oracle {oracle}"),
    )?;

    let gts = vec![gt("a", bbox(0.0, 0.0, 10.0, 10.0)), gt("b", bbox(3.0, 3.0, 8.0, 8.0))];
    let perfect: Vec<_> = gts.iter().map(|g| det(&g.image_id, g.bbox, 0.9)).collect();
    let report = eval::ap_range(&perfect, &gts).map_err(|e| e.to_string())?;
    ensure(report.ap_50_95 == 1.0, "ap_range: perfect detections")?;
    // A 6x10 box inside a 10x10 one has IoU 60/100.
    let narrowed: Vec<_> = gts
        .iter()
        .map(|g| {
            let square = bbox(g.bbox.x, g.bbox.y, 10.0, 10.0);
            (gt(&g.image_id, square), det(&g.image_id, bbox(g.bbox.x, g.bbox.y, 6.0, 10.0), 0.5))
        })
        .collect();
    let (gts, shifted): (Vec<_>, Vec<_>) = narrowed.into_iter().unzip();
    let report = eval::ap_range(&shifted, &gts).map_err(|e| e.to_string())?;
    let aps: Vec<f64> = report.per_threshold.iter().map(|t| t.ap).collect();
    ensure(aps[..3] == [1.0; 3] && aps[3..].iter().all(|&v| v == 0.0), format!("ap_range: IoU 0.6 gave {aps:?}"))?;
    ensure((report.ap_50_95 - 0.3).abs() < 1e-12, format!("ap_range: mean {}", report.ap_50_95))?;
    let empty = eval::ap_range(&[], &gts).map_err(|e| e.to_string())?;
    ensure(empty.per_threshold.iter().all(|t| t.ap == 0.0) && empty.ap_50_95 == 0.0, "ap_range: empty detections")?;

    let mut rng = XorShift64Star::new(8);
    for trial in 0..200 {
        let images = ["a", "b", "c"];
        let gts: Vec<_> = (0..rng.range(1, 8))
            .map(|_| {
                let img = images[rng.range(0, 3)];
                gt(img, bbox(rng.uniform(0.0, 50.0), rng.uniform(0.0, 50.0), rng.uniform(4.0, 20.0), rng.uniform(4.0, 20.0)))
            })
            .collect();
        let dets: Vec<_> = (0..rng.range(0, 12))
            .map(|_| {
                let g = &gts[rng.range(0, gts.len())];
                let jitter = rng.uniform(0.0, 4.0);
                let b = bbox(g.bbox.x + jitter, g.bbox.y + rng.uniform(-2.0, 2.0), g.bbox.w, g.bbox.h);
                det(&g.image_id, b, rng.next_f64())
            })
            .collect();
        let report = eval::ap_range(&dets, &gts).map_err(|e| e.to_string())?;
        let aps: Vec<f64> = report.per_threshold.iter().map(|t| t.ap).collect();
        ensure(aps.windows(2).all(|w| w[1] <= w[0]), format!("trial {trial}: AP not monotone in tau: {aps:?}"))?;
        let mean = aps.iter().sum::<f64>() / 10.0;
        ensure(
            report.ap_50_95.to_bits() == mean.to_bits(),
            format!("trial {trial}: ap_50_95 {} != mean {mean}", report.ap_50_95),
        )?;
    }
    Ok("examples exact, 5/6 matches oracle, monotone and bit-exact mean on 200 random sets".into())
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_specfuse")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run_cli(args: &[&str]) -> Result<Duration, String> {
    let start = Instant::now();
    let out = Command::new(binary()).args(args).output().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if !out.status.success() {
        return Err(format!("`specfuse {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(elapsed)
}

fn read_exports(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name != "timing.json" {
            files.insert(name, fs::read(&path).map_err(|e| e.to_string())?);
        }
    }
    Ok(files)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rgb = fixture("rgb.png");
    let thermal = fixture("thermal.png");
    let mut exports = Vec::new();
    for (run, threads) in [(0, "1"), (1, "8"), (2, "8")] {
        let out = tmp.path().join(format!("run{run}"));
        run_cli(&[
            "--threads",
            threads,
            "fuse",
            "--rgb",
            rgb.to_str().unwrap(),
            "--thermal",
            thermal.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])?;
        exports.push(read_exports(&out)?);
    }
    ensure(exports[0].len() > 3, "too few exported files")?;
    for (i, other) in exports.iter().enumerate().skip(1) {
        let names: Vec<_> = exports[0].keys().collect();
        ensure(names == other.keys().collect::<Vec<_>>(), format!("run {i} exported a different file set"))?;
        for (name, bytes) in &exports[0] {
            ensure(&other[name] == bytes, format!("run {i}: {name} differs"))?;
        }
    }
    Ok(format!("{} files bit-identical across 3 runs (threads 1, 8, 8)", exports[0].len()))
}

fn performance() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = tmp.path().join("input");
    run_cli(&["bench", "--seed", "3", "--size", "512x640", "--out", input.to_str().unwrap()])?;
    let out = tmp.path().join("out");
    let elapsed = run_cli(&[
        "--threads",
        "1",
        "fuse",
        "--rgb",
        input.join("rgb.png").to_str().unwrap(),
        "--thermal",
        input.join("thermal.png").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])?;
    within_budget(elapsed, 10.0)?;
    Ok(format!("640x512 fuse in {:.2} s on one thread", elapsed.as_secs_f64()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("spectral correctness", spectral_correctness),
        ("amplitude and phase suite", amplitude_phase_suite),
        ("overlap-add identity", overlap_add_identity),
        ("guidance suite", guidance_suite),
        ("deformable identity and blur", sampling_suite),
        ("gradient checks", gradient_suite),
        ("oracle-offset alignment", oracle_alignment),
        ("evaluation math", evaluation_suite),
        ("end-to-end determinism", determinism),
        ("performance floor", performance),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
