//! Detection metrics (all-point AP, size-bucketed AP, recall@100) and
//! throughput/complexity measurement.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use crate::boxes::{iou, BoxXyxy, DetRecord, GtBox};
use crate::detector::{detect_batch, DetectOpts};
use crate::error::Result;
use crate::model::{Model, ModelConfig, ANCHORS_PER_LOCATION};
use crate::params::ParamStore;
use crate::resblock::ResMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ground truth for one image.
#[derive(Debug, Clone)]
pub struct GtRecord {
    pub image_id: String,
    pub gt: GtBox,
}

/// Pixel-area bucket edges on the 64-pixel canvas (fraction areas are
/// scaled by 64^2 before comparison).
pub const BUCKET_SMALL_MAX: f64 = 144.0;
pub const BUCKET_MEDIUM_MAX: f64 = 900.0;
pub const BUCKET_NAMES: [&str; 3] = ["small", "medium", "large"];

pub fn size_bucket(bbox: &BoxXyxy) -> usize {
    let area_px = bbox.area() * (64.0 * 64.0);
    if area_px < BUCKET_SMALL_MAX {
        0
    } else if area_px < BUCKET_MEDIUM_MAX {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// AP per class; `None` for classes with no ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
    /// AP per size bucket; `None` where the bucket holds no ground truth.
    pub bucket_ap: [Option<f64>; 3],
    pub recall_at_100: f64,
    /// (detections per image, number of such images), ascending.
    pub det_histogram: Vec<(usize, usize)>,
}

/// Content-determined detection order: score descending, then image,
/// box coordinates, and class. Independent of input permutation, so
/// every metric downstream is too.
fn canonical_order(dets: &[DetRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.det
            .score
            .partial_cmp(&da.det.score)
            .unwrap()
            .then(da.image_id.cmp(&db.image_id))
            .then(da.det.bbox.x1.partial_cmp(&db.det.bbox.x1).unwrap())
            .then(da.det.bbox.y1.partial_cmp(&db.det.bbox.y1).unwrap())
            .then(da.det.bbox.x2.partial_cmp(&db.det.bbox.x2).unwrap())
            .then(da.det.bbox.y2.partial_cmp(&db.det.bbox.y2).unwrap())
            .then(da.det.class.cmp(&db.det.class))
    });
    order
}

/// Greedy matching of score-ordered detections of one class against the
/// class's gts: each detection takes its best still-free gt in the same
/// image at IoU >= `iou_thresh`. Returns per-detection TP flags and the
/// matched gt index (into `gts`) per detection.
fn greedy_match(
    dets: &[&DetRecord],
    gts: &[&GtRecord],
    iou_thresh: f64,
) -> (Vec<bool>, Vec<Option<usize>>) {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (gi, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(gi);
    }
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    let mut matched_gt = vec![None; dets.len()];
    for (di, d) in dets.iter().enumerate() {
        let Some(cands) = by_image.get(d.image_id.as_str()) else { continue };
        let mut best: Option<(usize, f64)> = None;
        for &gi in cands {
            if taken[gi] {
                continue;
            }
            let v = iou(&d.det.bbox, &gts[gi].gt.bbox);
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            tp[di] = true;
            matched_gt[di] = Some(gi);
        }
    }
    (tp, matched_gt)
}

/// Area under the monotone-interpolated precision-recall curve.
fn ap_from_flags(tp: &[bool], num_gts: usize) -> f64 {
    if num_gts == 0 {
        return 0.0;
    }
    let n = tp.len();
    let mut prec = Vec::with_capacity(n);
    let mut rec = Vec::with_capacity(n);
    let mut tps = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            tps += 1;
        }
        prec.push(tps as f64 / (i + 1) as f64);
        rec.push(tps as f64 / num_gts as f64);
    }
    for i in (0..n.saturating_sub(1)).rev() {
        if prec[i + 1] > prec[i] {
            prec[i] = prec[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_rec = 0.0;
    for i in 0..n {
        if rec[i] > prev_rec {
            ap += (rec[i] - prev_rec) * prec[i];
            prev_rec = rec[i];
        }
    }
    ap
}

/// All-point average precision of one class; `None` when the class has
/// no ground truth.
pub fn average_precision(
    dets: &[DetRecord],
    gts: &[GtRecord],
    class: usize,
    iou_thresh: f64,
) -> Option<f64> {
    let class_gts: Vec<&GtRecord> = gts.iter().filter(|g| g.gt.class == class).collect();
    if class_gts.is_empty() {
        return None;
    }
    let order = canonical_order(dets);
    let class_dets: Vec<&DetRecord> = order
        .iter()
        .map(|&i| &dets[i])
        .filter(|d| d.det.class == class)
        .collect();
    let (tp, _) = greedy_match(&class_dets, &class_gts, iou_thresh);
    Some(ap_from_flags(&tp, class_gts.len()))
}

fn bucket_average_precision(
    dets: &[DetRecord],
    gts: &[GtRecord],
    num_classes: usize,
    iou_thresh: f64,
    bucket: usize,
) -> Option<f64> {
    // first a global match per class, to learn which detections belong
    // to out-of-bucket objects; those are ignored, not penalized
    let order = canonical_order(dets);
    let mut ignored = vec![false; dets.len()];
    for class in 0..num_classes {
        let class_gts: Vec<&GtRecord> = gts.iter().filter(|g| g.gt.class == class).collect();
        let idxs: Vec<usize> = order
            .iter()
            .cloned()
            .filter(|&i| dets[i].det.class == class)
            .collect();
        let class_dets: Vec<&DetRecord> = idxs.iter().map(|&i| &dets[i]).collect();
        let (_, matched) = greedy_match(&class_dets, &class_gts, iou_thresh);
        for (k, m) in matched.iter().enumerate() {
            if let Some(gi) = m {
                if size_bucket(&class_gts[*gi].gt.bbox) != bucket {
                    ignored[idxs[k]] = true;
                }
            }
        }
    }

    let kept: Vec<DetRecord> = dets
        .iter()
        .enumerate()
        .filter(|(i, _)| !ignored[*i])
        .map(|(_, d)| d.clone())
        .collect();
    let bucket_gts: Vec<GtRecord> = gts
        .iter()
        .filter(|g| size_bucket(&g.gt.bbox) == bucket)
        .cloned()
        .collect();
    if bucket_gts.is_empty() {
        return None;
    }
    let mut aps = Vec::new();
    for class in 0..num_classes {
        if let Some(ap) = average_precision(&kept, &bucket_gts, class, iou_thresh) {
            aps.push(ap);
        }
    }
    Some(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn recall_at_100(dets: &[DetRecord], gts: &[GtRecord], num_classes: usize, iou_thresh: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    // cap each image at its 100 highest-scoring detections
    let order = canonical_order(dets);
    let mut per_image: HashMap<&str, usize> = HashMap::new();
    let mut capped: Vec<DetRecord> = Vec::new();
    for &i in &order {
        let c = per_image.entry(dets[i].image_id.as_str()).or_insert(0);
        if *c < 100 {
            *c += 1;
            capped.push(dets[i].clone());
        }
    }
    let mut matched = 0usize;
    for class in 0..num_classes {
        let class_gts: Vec<&GtRecord> = gts.iter().filter(|g| g.gt.class == class).collect();
        let class_dets: Vec<&DetRecord> =
            capped.iter().filter(|d| d.det.class == class).collect();
        let (tp, _) = greedy_match(&class_dets, &class_gts, iou_thresh);
        matched += tp.iter().filter(|&&t| t).count();
    }
    matched as f64 / gts.len() as f64
}

/// Full evaluation of a detection dump against ground truth.
pub fn evaluate(
    dets: &[DetRecord],
    gts: &[GtRecord],
    num_classes: usize,
    iou_thresh: f64,
) -> EvalReport {
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| average_precision(dets, gts, c, iou_thresh))
        .collect();
    let present: Vec<f64> = per_class.iter().filter_map(|&ap| ap).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let bucket_ap = [0, 1, 2]
        .map(|b| bucket_average_precision(dets, gts, num_classes, iou_thresh, b));

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for d in dets {
        *counts.entry(d.image_id.as_str()).or_insert(0) += 1;
    }
    let mut hist_map: HashMap<usize, usize> = HashMap::new();
    for g in gts {
        counts.entry(g.image_id.as_str()).or_insert(0);
    }
    for (_, c) in counts {
        *hist_map.entry(c).or_insert(0) += 1;
    }
    let mut det_histogram: Vec<(usize, usize)> = hist_map.into_iter().collect();
    det_histogram.sort();

    EvalReport {
        per_class,
        map,
        bucket_ap,
        recall_at_100: recall_at_100(dets, gts, num_classes, iou_thresh),
        det_histogram,
    }
}

impl EvalReport {
    /// Machine-readable companion of the text report.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("map={:.6}\n", self.map));
        for (c, ap) in self.per_class.iter().enumerate() {
            if let Some(v) = ap {
                s.push_str(&format!("ap.class{}={:.6}\n", c, v));
            }
        }
        for (b, ap) in self.bucket_ap.iter().enumerate() {
            if let Some(v) = ap {
                s.push_str(&format!("ap.{}={:.6}\n", BUCKET_NAMES[b], v));
            }
        }
        s.push_str(&format!("recall_at_100={:.6}\n", self.recall_at_100));
        for (count, images) in &self.det_histogram {
            s.push_str(&format!("hist.{}={}\n", count, images));
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mAP@0.5: {:.4}", self.map)?;
        for (c, ap) in self.per_class.iter().enumerate() {
            match ap {
                Some(v) => writeln!(f, "  class {}: AP {:.4}", c, v)?,
                None => writeln!(f, "  class {}: no ground truth", c)?,
            }
        }
        for (b, ap) in self.bucket_ap.iter().enumerate() {
            match ap {
                Some(v) => writeln!(f, "  {:>6}: AP {:.4}", BUCKET_NAMES[b], v)?,
                None => writeln!(f, "  {:>6}: empty", BUCKET_NAMES[b])?,
            }
        }
        writeln!(f, "recall@100: {:.4}", self.recall_at_100)?;
        write!(f, "detections/image:")?;
        for (count, images) in &self.det_histogram {
            write!(f, " {}x{}", count, images)?;
        }
        writeln!(f)
    }
}

// ---- throughput ----

#[derive(Debug, Clone)]
pub struct FpsReport {
    pub median_ms_per_image: f64,
    pub p95_ms_per_image: f64,
    pub images_per_second: f64,
    pub batch_size: usize,
    pub repeats: usize,
}

impl fmt::Display for FpsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.2} img/s (median {:.3} ms, p95 {:.3} ms, batch {}, {} repeats)",
            self.images_per_second,
            self.median_ms_per_image,
            self.p95_ms_per_image,
            self.batch_size,
            self.repeats
        )
    }
}

/// End-to-end throughput (forward, decode, NMS) over a fixed batch:
/// three untimed warmup runs, then `repeats` timed runs, reporting the
/// median and 95th-percentile per-image wall time.
pub fn benchmark_fps<S: Scalar>(
    model: &Model<S>,
    store: &ParamStore<S>,
    images: &Tensor<S>,
    repeats: usize,
) -> Result<FpsReport> {
    let (batch, _, _, _) = images.dims4()?;
    let opts = DetectOpts::default();
    for _ in 0..3 {
        detect_batch(model, store, images.clone(), &opts)?;
    }
    let mut per_image_ms = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        detect_batch(model, store, images.clone(), &opts)?;
        per_image_ms.push(t0.elapsed().as_secs_f64() * 1000.0 / batch as f64);
    }
    per_image_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = per_image_ms.len();
    let median = if n % 2 == 1 {
        per_image_ms[n / 2]
    } else {
        0.5 * (per_image_ms[n / 2 - 1] + per_image_ms[n / 2])
    };
    let p95 = per_image_ms[((n as f64 * 0.95).ceil() as usize).clamp(1, n) - 1];
    Ok(FpsReport {
        median_ms_per_image: median,
        p95_ms_per_image: p95,
        images_per_second: 1000.0 / median,
        batch_size: batch,
        repeats: repeats.max(1),
    })
}

// ---- analytic complexity ----

/// Multiply-accumulate counts per image, conv/deconv kernels only
/// (activations, pooling, and normalization excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacCount {
    pub backbone: u64,
    pub enrichment: u64,
    pub heads: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.backbone + self.enrichment + self.heads
    }
}

pub fn mac_count(config: &ModelConfig) -> MacCount {
    let bb = &config.backbone;
    let mut backbone = 0u64;
    let mut side = bb.input_size;
    let mut in_c = 3usize;
    let deepest = *bb.source_stages.last().unwrap();
    for stage in 1..=deepest {
        let out_c = bb.stage_widths[stage - 1];
        backbone += (side * side * out_c * in_c * 9) as u64;
        side /= 2;
        in_c = out_c;
    }

    let shapes = bb.source_shapes();
    let k = shapes.len();
    let out_chans = ANCHORS_PER_LOCATION * (4 + config.num_classes + 1);
    let mut enrichment = 0u64;
    let mut heads = 0u64;
    match config.res_mode {
        ResMode::None => {
            for &(s, c) in &shapes {
                heads += (s * s * out_chans * c * 9) as u64;
            }
        }
        mode => {
            let d = config.depth;
            for (l, &(s, c)) in shapes.iter().enumerate() {
                let hw = s * s;
                enrichment += (hw * d * c) as u64; // branch1 1x1
                enrichment += (hw * (d / 2) * c) as u64; // branch2 reduce
                enrichment += (hw * d * (d / 2) * 9) as u64; // branch2 context
                if mode == ResMode::ThreeWay && l + 1 < k {
                    let c_next = shapes[l + 1].1;
                    // kernel-2 stride-2 deconv: one tap per output cell
                    enrichment += (hw * d * c_next) as u64;
                    enrichment += (hw * d * d * 9) as u64; // smoothing conv
                }
                heads += (hw * out_chans * d * 9) as u64;
            }
        }
    }
    MacCount { backbone, enrichment, heads }
}
