use std::f64::consts::PI;

use proptest::prelude::*;

use specfuse_core::eval::{ap_range, iou, match_detections, BBox, Detection, GroundTruth};
use specfuse_core::lfca::{align_phase, blend_amplitude};
use specfuse_core::spectral::{overlap_add, partition, wrap, Fft2d, PatchGrid};
use specfuse_core::tensor::{conv2d, ConvSpec, ConvWeights, FeatureMap, Padding};

fn boxes() -> impl Strategy<Value = BBox> {
    (0.0..40.0f64, 0.0..40.0f64, 1.0..15.0f64, 1.0..15.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
}

fn scene() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruth>)> {
    let gts = prop::collection::vec((0..3usize, boxes()), 0..6);
    // Scores on a dyadic grid so halving them is exact.
    let dets = prop::collection::vec((0..3usize, boxes(), 1..64u32), 0..10);
    (dets, gts).prop_map(|(d, g)| {
        let dets = d
            .into_iter()
            .map(|(i, bbox, s)| Detection { image_id: format!("img{i}"), bbox, score: s as f64 / 64.0 })
            .collect();
        let gts = g.into_iter().map(|(i, bbox)| GroundTruth { image_id: format!("img{i}"), bbox }).collect();
        (dets, gts)
    })
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    (if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i }) as usize
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blend_stays_between_inputs(
        pairs in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..64),
        alpha in 0.0..=1.0f64,
    ) {
        let (r, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let out = blend_amplitude(&r, &t, alpha).unwrap();
        for ((o, a), b) in out.iter().zip(&r).zip(&t) {
            prop_assert!(*o >= a.min(*b) && *o <= a.max(*b));
        }
    }

    #[test]
    fn phase_moves_a_beta_fraction_of_the_wrapped_gap(
        pairs in prop::collection::vec((-PI..PI, -PI..PI), 1..64),
        beta in 0.0..=1.0f64,
    ) {
        let (r, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let out = align_phase(&r, &t, beta).unwrap();
        for ((a, r), t) in out.iter().zip(&r).zip(&t) {
            prop_assert!((-PI..=PI).contains(a));
            let gap = wrap(r - t);
            prop_assume!(PI - gap.abs() > 1e-9);
            prop_assert!((wrap(a - t).abs() - beta * gap.abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn wrap_is_principal_and_congruent(x in -1e4..1e4f64) {
        let w = wrap(x);
        prop_assert!((-PI..=PI).contains(&w));
        let turns = (x - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn fft_round_trips(values in prop::collection::vec(-10.0..10.0f64, 256)) {
        let fft = Fft2d::new(16).unwrap();
        let back = fft.inverse(&fft.forward(&values).unwrap(), 1e-9).unwrap();
        for (a, b) in back.iter().zip(&values) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn overlap_add_reconstructs_any_map(h in 16..48usize, w in 16..48usize, seed in any::<u32>()) {
        let map = FeatureMap::from_fn(h, w, 1, |y, x, _| ((y * 31 + x * 17 + seed as usize) % 97) as f32 / 97.0);
        let grid = PatchGrid::new(h, w, 16, 8).unwrap();
        let back = overlap_add(&partition(&map, &grid).unwrap(), &grid).unwrap();
        for (a, b) in back.data().iter().zip(map.data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn ap_never_increases_with_tau((dets, gts) in scene()) {
        let report = ap_range(&dets, &gts).unwrap();
        let aps: Vec<f64> = report.per_threshold.iter().map(|t| t.ap).collect();
        prop_assert!(aps.windows(2).all(|w| w[1] <= w[0]), "{:?}", aps);
        prop_assert!(aps.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert_eq!(report.ap_50_95, aps.iter().sum::<f64>() / 10.0);
    }

    #[test]
    fn ap_ignores_positive_score_scaling((dets, gts) in scene(), halvings in 0..8i32) {
        let scaled: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { score: d.score * 0.5f64.powi(halvings), ..d.clone() })
            .collect();
        prop_assert_eq!(ap_range(&dets, &gts).unwrap(), ap_range(&scaled, &gts).unwrap());
    }

    #[test]
    fn matching_is_injective((dets, gts) in scene(), tau in 0.05..=1.0f64) {
        let m = match_detections(&dets, &gts, tau).unwrap();
        let mut used: Vec<usize> = m.assigned.iter().flatten().copied().collect();
        let n = used.len();
        used.sort_unstable();
        used.dedup();
        prop_assert_eq!(used.len(), n);
        prop_assert_eq!(m.tp, n);
        prop_assert_eq!(m.tp + m.fp, dets.len());
        prop_assert_eq!(m.tp + m.fn_, gts.len());
        for (g, d) in m.assigned.iter().enumerate() {
            if let Some(d) = *d {
                prop_assert_eq!(&dets[d].image_id, &gts[g].image_id);
                prop_assert!(iou(&dets[d].bbox, &gts[g].bbox) >= tau);
            }
        }
    }

    #[test]
    fn conv_matches_nested_loops(
        (h, w) in (5..14usize, 5..14usize),
        (cin, cout) in (1..20usize, 1..40usize),
        (stride, dilation, zero) in (1..3usize, 1..3usize, any::<bool>()),
        seed in any::<u16>(),
    ) {
        let val = |i: usize, salt: usize| (((i * 2654435761 + salt * 40503 + seed as usize) % 1000) as f32 / 500.0) - 1.0;
        let map = FeatureMap::from_fn(h, w, cin, |y, x, c| val((y * w + x) * cin + c, 1));
        let weights = (0..9 * cin * cout).map(|i| val(i, 2)).collect();
        let bias = (0..cout).map(|i| val(i, 3)).collect();
        let k = ConvWeights::new(3, 3, cin, cout, weights, bias).unwrap();
        let padding = if zero { Padding::Zero } else { Padding::Reflect };
        let out = conv2d(&map, &k, ConvSpec { dilation, stride, padding }).unwrap();
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        prop_assert_eq!(out.dims(), (oh, ow, cout));
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = k.bias[co] as f64;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = (oy * stride + ky * dilation) as isize - dilation as isize;
                            let sx = (ox * stride + kx * dilation) as isize - dilation as isize;
                            let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize;
                            if !inside && zero {
                                continue;
                            }
                            let (sy, sx) = (reflect(sy, h), reflect(sx, w));
                            for ci in 0..cin {
                                acc += map.get(sy, sx, ci) as f64 * k.weights[k.index(ky, kx, ci, co)] as f64;
                            }
                        }
                    }
                    let got = out.get(oy, ox, co) as f64;
                    prop_assert!((got - acc).abs() < 1e-5 * acc.abs().max(1.0), "{} vs {}", got, acc);
                }
            }
        }
    }
}
