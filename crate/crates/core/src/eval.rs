//! Detection metrics: IoU, greedy matching, all-point AP and the
//! ten-threshold AP average.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box, top-left corner plus size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidArgument(format!("box [{x}, {y}, {w}, {h}] needs finite values and positive size")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from([x, y, w, h]: [f64; 4]) -> Result<Self> {
        Self::new(x, y, w, h)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indices into the detection list, by descending score.
    pub order: Vec<usize>,
    /// `true` for a true positive, in `order`.
    pub flags: Vec<bool>,
    /// For each ground truth, the detection matched to it.
    pub assigned: Vec<Option<usize>>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("IoU threshold must lie in (0, 1], got {tau}")));
    }
    Ok(())
}

/// Detections sorted by descending score (stable), each claiming the unmatched
/// ground truth of its image with the highest IoU ≥ `tau`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], tau: f64) -> Result<MatchResult> {
    check_tau(tau)?;
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut assigned = vec![None; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for &g in by_image.get(det.image_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
            if assigned[g].is_some() {
                continue;
            }
            let v = iou(&det.bbox, &gts[g].bbox);
            if v >= tau && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            assigned[g] = Some(d);
        }
        flags.push(best.is_some());
    }
    let tp = flags.iter().filter(|&&f| f).count();
    Ok(MatchResult {
        order,
        flags,
        assigned,
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Precision and recall after each detection in score order.
pub fn pr_curve(flags: &[bool], total_gts: usize) -> Vec<PrPoint> {
    let (mut tp, mut fp) = (0, 0);
    flags
        .iter()
        .map(|&f| {
            if f {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                precision: tp as f64 / (tp + fp) as f64,
                recall: if total_gts == 0 { 0.0 } else { tp as f64 / total_gts as f64 },
                tp,
                fp,
                fn_: total_gts.saturating_sub(tp),
            }
        })
        .collect()
}

/// All-point interpolated area under the precision–recall curve. Zero when
/// there are no ground truths.
pub fn average_precision(flags: &[bool], total_gts: usize) -> f64 {
    if total_gts == 0 {
        return 0.0;
    }
    let curve = pr_curve(flags, total_gts);
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub tau: f64,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_detections: usize,
    pub num_ground_truths: usize,
    pub per_threshold: Vec<ThresholdReport>,
    pub ap_50: f64,
    pub ap_75: f64,
    pub ap_50_95: f64,
}

pub fn evaluate_at(dets: &[Detection], gts: &[GroundTruth], tau: f64) -> Result<ThresholdReport> {
    let m = match_detections(dets, gts, tau)?;
    Ok(ThresholdReport {
        tau,
        ap: average_precision(&m.flags, gts.len()),
        tp: m.tp,
        fp: m.fp,
        fn_: m.fn_,
        curve: pr_curve(&m.flags, gts.len()),
    })
}

pub fn ap_range(dets: &[Detection], gts: &[GroundTruth]) -> Result<EvalReport> {
    let per_threshold = thresholds()
        .iter()
        .map(|&tau| evaluate_at(dets, gts, tau))
        .collect::<Result<Vec<_>>>()?;
    let sum: f64 = per_threshold.iter().map(|t| t.ap).sum();
    Ok(EvalReport {
        num_detections: dets.len(),
        num_ground_truths: gts.len(),
        ap_50: per_threshold[0].ap,
        ap_75: per_threshold[5].ap,
        ap_50_95: sum / 10.0,
        per_threshold,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = read_json(path)?;
    if let Some(d) = dets.iter().find(|d| !(0.0..=1.0).contains(&d.score)) {
        return Err(Error::Format(format!("{}: score {} of {} is outside [0, 1]", path.display(), d.score, d.image_id)));
    }
    Ok(dets)
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn det(id: &str, bbox: BBox, score: f64) -> Detection {
        Detection { image_id: id.into(), bbox, score }
    }

    fn gt(id: &str, bbox: BBox) -> GroundTruth {
        GroundTruth { image_id: id.into(), bbox }
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert_eq!(iou(&a, &b(2.0, 0.0, 2.0, 2.0)), 0.0);
        assert_eq!(iou(&a, &b(1.0, 0.0, 2.0, 2.0)), 1.0 / 3.0);
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn match_examples() {
        let g = b(10.0, 10.0, 5.0, 5.0);
        let m = match_detections(&[det("a", g, 0.9)], &[gt("a", g)], 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));

        let m = match_detections(&[], &[gt("a", g)], 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 1));

        let dets = [det("a", b(10.5, 10.0, 5.0, 5.0), 0.4), det("a", g, 0.8)];
        let m = match_detections(&dets, &[gt("a", g)], 0.5).unwrap();
        assert_eq!(m.order, vec![1, 0]);
        assert_eq!(m.flags, vec![true, false]);
        assert_eq!(m.assigned, vec![Some(1)]);
    }

    #[test]
    fn matching_respects_image_ids() {
        let g = b(0.0, 0.0, 4.0, 4.0);
        let m = match_detections(&[det("b", g, 0.9)], &[gt("a", g)], 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn equal_scores_keep_input_order() {
        let g = b(0.0, 0.0, 4.0, 4.0);
        let dets = [det("a", b(0.5, 0.0, 4.0, 4.0), 0.5), det("a", g, 0.5)];
        let m = match_detections(&dets, &[gt("a", g)], 0.5).unwrap();
        assert_eq!(m.order, vec![0, 1]);
        assert_eq!(m.flags, vec![true, false]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[false, false], 3), 0.0);
        assert_eq!(average_precision(&[], 0), 0.0);
        assert!((average_precision(&[true, false, true], 2) - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ap_range_examples() {
        let gts: Vec<_> = (0..3).map(|i| gt(&i.to_string(), b(0.0, 0.0, 10.0, 10.0))).collect();
        let perfect: Vec<_> = gts.iter().map(|g| det(&g.image_id, g.bbox, 0.9)).collect();
        let r = ap_range(&perfect, &gts).unwrap();
        assert!(r.per_threshold.iter().all(|t| t.ap == 1.0));
        assert_eq!(r.ap_50_95, 1.0);

        // IoU exactly 0.6 against every ground truth.
        let partial: Vec<_> = gts.iter().map(|g| det(&g.image_id, b(0.0, 0.0, 6.0, 10.0), 0.7)).collect();
        let r = ap_range(&partial, &gts).unwrap();
        let aps: Vec<f64> = r.per_threshold.iter().map(|t| t.ap).collect();
        assert_eq!(aps, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((r.ap_50_95 - 0.3).abs() < 1e-15);

        let r = ap_range(&[], &gts).unwrap();
        assert_eq!((r.ap_50, r.ap_75, r.ap_50_95), (0.0, 0.0, 0.0));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        std::fs::write(&p, r#"[{"image_id":"x","bbox":[1,2,3,4],"score":0.5}]"#).unwrap();
        let d = load_detections(&p).unwrap();
        assert_eq!(d[0].bbox, b(1.0, 2.0, 3.0, 4.0));
        std::fs::write(&p, r#"[{"image_id":"x","bbox":[1,2,3,4],"score":1.5}]"#).unwrap();
        assert!(matches!(load_detections(&p), Err(Error::Format(_))));
        std::fs::write(&p, r#"[{"image_id":"x","bbox":[1,2,0,4],"score":0.5}]"#).unwrap();
        assert!(matches!(load_detections(&p), Err(Error::Json { .. })));
    }
}
