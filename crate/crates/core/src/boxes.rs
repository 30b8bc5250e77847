//! Box geometry: default-box grids, IoU, ground-truth matching, the
//! offset codec, NMS, the box-in-box diagnostic, and detection dump I/O.
//!
//! All geometry runs in `f64` regardless of the model's scalar type;
//! coordinates are fractions of the image side in `[0,1]`.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Center-form box; `w` and `h` are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCw {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-form box with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCw {
    pub fn to_corner(self) -> BoxXyxy {
        BoxXyxy {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXyxy { x1, y1, x2, y2 }
    }

    pub fn to_center(self) -> BoxCw {
        BoxCw {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    /// Clamp corners into the unit square (detection-output stage only;
    /// the codec round trip must not clip).
    pub fn clip_unit(self) -> BoxXyxy {
        BoxXyxy {
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
            x2: self.x2.clamp(0.0, 1.0),
            y2: self.y2.clamp(0.0, 1.0),
        }
    }
}

pub fn intersection_area(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w > 0.0 && h > 0.0 {
        w * h
    } else {
        0.0
    }
}

/// Intersection over union; 0 for disjoint boxes or an empty union.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// The fixed set of anchor boxes all predictions are relative to, in the
/// same flattening order the heads use: level-major, then row, column,
/// and anchor slot within the location.
#[derive(Debug, Clone)]
pub struct DefaultBoxSet {
    centers: Vec<BoxCw>,
    corners: Vec<BoxXyxy>,
    /// (H, W) of each pyramid level's feature map.
    level_dims: Vec<(usize, usize)>,
    scales: Vec<f64>,
    per_location: usize,
}

impl DefaultBoxSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn center(&self, i: usize) -> &BoxCw {
        &self.centers[i]
    }

    pub fn corner(&self, i: usize) -> &BoxXyxy {
        &self.corners[i]
    }

    pub fn corners(&self) -> &[BoxXyxy] {
        &self.corners
    }

    pub fn level_dims(&self) -> &[(usize, usize)] {
        &self.level_dims
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn per_location(&self) -> usize {
        self.per_location
    }
}

/// Anchor grid over a feature pyramid. Level scales interpolate linearly
/// from `s_min` to `s_max`; each location gets up to six boxes in the
/// order: ratio 1 at `s_l`, ratio 1 at `sqrt(s_l * s_{l+1})` (with
/// `s_{k+1} := 1`), then ratios 2, 1/2, 3, 1/3. Widths and heights are
/// `s*sqrt(ar)` and `s/sqrt(ar)`, clamped to the unit interval; centers
/// sit at pixel centers `((j+0.5)/W, (i+0.5)/H)`.
pub fn generate_default_boxes(
    level_dims: &[(usize, usize)],
    s_min: f64,
    s_max: f64,
    per_location: usize,
) -> Result<DefaultBoxSet> {
    let k = level_dims.len();
    if k < 2 {
        return Err(Error::config(format!(
            "default boxes need at least 2 pyramid levels, got {}",
            k
        )));
    }
    if !(per_location >= 1 && per_location <= 6) {
        return Err(Error::config(format!(
            "boxes per location must be in 1..=6, got {}",
            per_location
        )));
    }
    if !(s_min > 0.0 && s_min < s_max && s_max <= 1.0) {
        return Err(Error::config(format!(
            "scale range must satisfy 0 < s_min < s_max <= 1, got {} and {}",
            s_min, s_max
        )));
    }
    let scales: Vec<f64> = (0..k)
        .map(|l| s_min + (s_max - s_min) * l as f64 / (k - 1) as f64)
        .collect();
    let mut centers = Vec::new();
    for (l, &(h, w)) in level_dims.iter().enumerate() {
        if h == 0 || w == 0 {
            return Err(Error::config("pyramid level with empty grid".to_string()));
        }
        let s = scales[l];
        let s_next = if l + 1 < k { scales[l + 1] } else { 1.0 };
        let s_prime = (s * s_next).sqrt();
        // (scale, aspect ratio) per anchor slot
        let slots: [(f64, f64); 6] = [
            (s, 1.0),
            (s_prime, 1.0),
            (s, 2.0),
            (s, 0.5),
            (s, 3.0),
            (s, 1.0 / 3.0),
        ];
        for i in 0..h {
            for j in 0..w {
                let cx = (j as f64 + 0.5) / w as f64;
                let cy = (i as f64 + 0.5) / h as f64;
                for &(bs, ar) in slots.iter().take(per_location) {
                    let bw = (bs * ar.sqrt()).min(1.0);
                    let bh = (bs / ar.sqrt()).min(1.0);
                    centers.push(BoxCw { cx, cy, w: bw, h: bh });
                }
            }
        }
    }
    let corners = centers.iter().map(|c| c.to_corner()).collect();
    Ok(DefaultBoxSet {
        centers,
        corners,
        level_dims: level_dims.to_vec(),
        scales,
        per_location,
    })
}

/// Outcome of matching ground truths against the default boxes.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// Per default box: index of the matched ground truth, or None for
    /// background.
    pub assignment: Vec<Option<usize>>,
    /// Per ground truth: the default box claimed as its best match.
    pub best_default: Vec<usize>,
}

impl MatchResult {
    pub fn positive_count(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }
}

/// Two-phase matching. First every ground truth claims its best-IoU
/// default (even below threshold; ties prefer the lowest default index,
/// then the lowest ground-truth index; a claimed default is never
/// reassigned). Then every remaining default matches its best ground
/// truth if that IoU reaches `threshold`.
pub fn match_boxes(
    defaults: &[BoxXyxy],
    gts: &[BoxXyxy],
    threshold: f64,
) -> Result<MatchResult> {
    let n = defaults.len();
    let m = gts.len();
    if m > n {
        return Err(Error::contract(format!(
            "{} ground truths cannot all claim one of {} defaults",
            m, n
        )));
    }
    let mut assignment: Vec<Option<usize>> = vec![None; n];
    let mut best_default = vec![usize::MAX; m];
    if m == 0 {
        return Ok(MatchResult { assignment, best_default });
    }
    let mut mat = vec![0.0f64; n * m];
    for (d, db) in defaults.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            mat[d * m + g] = iou(db, gb);
        }
    }
    let mut gt_done = vec![false; m];
    for _ in 0..m {
        let mut best = f64::NEG_INFINITY;
        let mut pick = (usize::MAX, usize::MAX);
        // default-major scan with strict '>' picks the lowest default
        // index (then lowest gt index) among ties
        for d in 0..n {
            if assignment[d].is_some() {
                continue;
            }
            for g in 0..m {
                if gt_done[g] {
                    continue;
                }
                if mat[d * m + g] > best {
                    best = mat[d * m + g];
                    pick = (d, g);
                }
            }
        }
        let (d, g) = pick;
        assignment[d] = Some(g);
        best_default[g] = d;
        gt_done[g] = true;
    }
    for d in 0..n {
        if assignment[d].is_some() {
            continue;
        }
        let mut best = threshold;
        let mut pick = None;
        for g in 0..m {
            if mat[d * m + g] >= best && (pick.is_none() || mat[d * m + g] > best) {
                best = mat[d * m + g];
                pick = Some(g);
            }
        }
        assignment[d] = pick;
    }
    Ok(MatchResult { assignment, best_default })
}

/// Regression variances for the box codec: (center, size).
pub const VARIANCES: (f64, f64) = (0.1, 0.2);

/// Offsets of a ground-truth box relative to a default box, both in
/// center form:
/// `((gcx-dcx)/(dw*v0), (gcy-dcy)/(dh*v0), ln(gw/dw)/v1, ln(gh/dh)/v1)`.
/// Encoding a box against itself yields exactly (0,0,0,0).
pub fn encode(gt: &BoxCw, default: &BoxCw, variances: (f64, f64)) -> [f64; 4] {
    [
        (gt.cx - default.cx) / (default.w * variances.0),
        (gt.cy - default.cy) / (default.h * variances.0),
        (gt.w / default.w).ln() / variances.1,
        (gt.h / default.h).ln() / variances.1,
    ]
}

/// Exact inverse of [`encode`]; no clipping (clip only at the detection
/// output stage).
pub fn decode(t: &[f64; 4], default: &BoxCw, variances: (f64, f64)) -> BoxCw {
    BoxCw {
        cx: t[0] * variances.0 * default.w + default.cx,
        cy: t[1] * variances.0 * default.h + default.cy,
        w: default.w * (t[2] * variances.1).exp(),
        h: default.h * (t[3] * variances.1).exp(),
    }
}

/// One annotated ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class: usize,
    pub bbox: BoxXyxy,
}

/// One scored box of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BoxXyxy,
}

/// Greedy non-maximum suppression over a single class: sort by score
/// (descending, ties keep the lower original index), truncate to
/// `top_k`, then keep each candidate unless it overlaps an already-kept
/// box with IoU strictly above `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64, top_k: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    order.truncate(top_k);
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        if kept.iter().all(|k| iou(&k.bbox, &dets[i].bbox) <= iou_thresh) {
            kept.push(dets[i].clone());
        }
    }
    kept
}

/// NMS applied independently per class; output ordered by class, then
/// score descending within the class.
pub fn nms_per_class(dets: &[Detection], num_classes: usize, iou_thresh: f64, top_k: usize) -> Vec<Detection> {
    let mut out = Vec::new();
    for c in 0..num_classes {
        let class_dets: Vec<Detection> = dets.iter().filter(|d| d.class == c).cloned().collect();
        out.extend(nms(&class_dets, iou_thresh, top_k));
    }
    out
}

/// Intersection over the smaller box's area; 1 when one box contains
/// the other.
pub fn intersection_over_smaller(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = intersection_area(a, b);
    let small = a.area().min(b.area());
    if small > 0.0 {
        inter / small
    } else {
        0.0
    }
}

/// Fraction of same-class detection pairs where one box essentially
/// contains the other (intersection over the smaller area reaches
/// `containment_iof`). Measures redundant nested detections; 0 when
/// fewer than two same-class detections exist.
pub fn box_in_box_rate(dets: &[Detection], containment_iof: f64) -> f64 {
    let mut pairs = 0u64;
    let mut contained = 0u64;
    for i in 0..dets.len() {
        for j in i + 1..dets.len() {
            if dets[i].class != dets[j].class {
                continue;
            }
            pairs += 1;
            if intersection_over_smaller(&dets[i].bbox, &dets[j].bbox) >= containment_iof {
                contained += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        contained as f64 / pairs as f64
    }
}

/// [`box_in_box_rate`] over a whole detection dump: pairs form within
/// each image only, counts pool across images, and detections below
/// `min_score` stay out of both sides of the ratio.
pub fn box_in_box_rate_pooled(
    records: &[DetRecord],
    containment_iof: f64,
    min_score: f64,
) -> f64 {
    let mut by_image: std::collections::HashMap<&str, Vec<&Detection>> =
        std::collections::HashMap::new();
    for r in records {
        if r.det.score >= min_score {
            by_image.entry(r.image_id.as_str()).or_default().push(&r.det);
        }
    }
    let mut pairs = 0u64;
    let mut contained = 0u64;
    for dets in by_image.values() {
        for i in 0..dets.len() {
            for j in i + 1..dets.len() {
                if dets[i].class != dets[j].class {
                    continue;
                }
                pairs += 1;
                if intersection_over_smaller(&dets[i].bbox, &dets[j].bbox) >= containment_iof {
                    contained += 1;
                }
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        contained as f64 / pairs as f64
    }
}

/// One line of a detection dump: the owning image plus the detection.
#[derive(Debug, Clone, PartialEq)]
pub struct DetRecord {
    pub image_id: String,
    pub det: Detection,
}

/// Write records as `image_id class score x1 y1 x2 y2` lines with six
/// decimal places.
pub fn write_detections<W: Write>(out: &mut W, records: &[DetRecord]) -> Result<()> {
    for r in records {
        writeln!(
            out,
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
            r.image_id, r.det.class, r.det.score, r.det.bbox.x1, r.det.bbox.y1, r.det.bbox.x2, r.det.bbox.y2
        )?;
    }
    Ok(())
}

/// Parse a detection dump; blank lines are skipped, anything else
/// malformed is a data error naming the line.
pub fn read_detections<R: BufRead>(input: R) -> Result<Vec<DetRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 7 {
            return Err(Error::data(format!(
                "detection dump line {}: expected 7 fields, got {}",
                lineno + 1,
                toks.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::data(format!("detection dump line {}: bad {} '{}'", lineno + 1, what, s)))
        };
        let class: usize = toks[1]
            .parse()
            .map_err(|_| Error::data(format!("detection dump line {}: bad class '{}'", lineno + 1, toks[1])))?;
        out.push(DetRecord {
            image_id: toks[0].to_string(),
            det: Detection {
                class,
                score: parse_f(toks[2], "score")?,
                bbox: BoxXyxy::new(
                    parse_f(toks[3], "x1")?,
                    parse_f(toks[4], "y1")?,
                    parse_f(toks[5], "x2")?,
                    parse_f(toks[6], "y2")?,
                ),
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk_dims() -> Vec<(usize, usize)> {
        vec![(16, 16), (8, 8), (4, 4), (2, 2)]
    }

    #[test]
    fn scales_interpolate_linearly() {
        let set = generate_default_boxes(&desk_dims(), 0.2, 0.9, 6).unwrap();
        let want = [0.2, 0.2 + 0.7 / 3.0, 0.2 + 1.4 / 3.0, 0.9];
        for (s, w) in set.scales().iter().zip(want) {
            assert!((s - w).abs() < 1e-15);
        }
    }

    #[test]
    fn ratio_one_box_is_square() {
        let set = generate_default_boxes(&desk_dims(), 0.2, 0.9, 6).unwrap();
        // first anchor of the first location: ratio 1 at s_1
        let b = set.center(0);
        assert_eq!(b.w, b.h);
        assert!((b.w - 0.2).abs() < 1e-15);
    }

    #[test]
    fn desk_grid_has_2040_boxes() {
        let set = generate_default_boxes(&desk_dims(), 0.2, 0.9, 6).unwrap();
        assert_eq!(set.len(), 6 * (256 + 64 + 16 + 4));
    }

    #[test]
    fn centers_strictly_inside_unit_square() {
        let set = generate_default_boxes(&desk_dims(), 0.2, 0.9, 6).unwrap();
        for i in 0..set.len() {
            let c = set.center(i);
            assert!(c.cx > 0.0 && c.cx < 1.0 && c.cy > 0.0 && c.cy < 1.0);
        }
    }

    #[test]
    fn sides_clamped_to_unit() {
        let set = generate_default_boxes(&desk_dims(), 0.2, 0.9, 6).unwrap();
        for i in 0..set.len() {
            let c = set.center(i);
            assert!(c.w > 0.0 && c.w <= 1.0 && c.h > 0.0 && c.h <= 1.0);
            assert!(set.corner(i).is_valid());
        }
        // ratio-3 box at the top scale would be 0.9*sqrt(3) wide unclamped
        let last_level_first = 6 * (256 + 64 + 16);
        let wide = set.center(last_level_first + 4);
        assert_eq!(wide.w, 1.0);
    }

    #[test]
    fn single_level_is_config_error() {
        let r = generate_default_boxes(&[(4, 4)], 0.2, 0.9, 6);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn iou_identical_is_one() {
        let a = BoxXyxy::new(0.1, 0.2, 0.5, 0.6);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BoxXyxy::new(0.0, 0.0, 0.2, 0.2);
        let b = BoxXyxy::new(0.5, 0.5, 0.7, 0.7);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_unit_overlap_example() {
        let a = BoxXyxy::new(0.0, 0.0, 2.0, 2.0);
        let b = BoxXyxy::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let rb = |rng: &mut ChaCha8Rng| {
                let x1: f64 = rng.random_range(0.0..0.8);
                let y1: f64 = rng.random_range(0.0..0.8);
                BoxXyxy::new(x1, y1, x1 + rng.random_range(0.05..0.2), y1 + rng.random_range(0.05..0.2))
            };
            let a = rb(&mut rng);
            let b = rb(&mut rng);
            assert_eq!(iou(&a, &b).to_bits(), iou(&b, &a).to_bits());
        }
    }

    #[test]
    fn exact_gt_claims_its_default() {
        let set = generate_default_boxes(&desk_dims(), 0.2, 0.9, 6).unwrap();
        let target = 123usize;
        let gt = *set.corner(target);
        let res = match_boxes(set.corners(), &[gt], 0.5).unwrap();
        assert_eq!(res.best_default[0], target);
        assert_eq!(res.assignment[target], Some(0));
    }

    #[test]
    fn empty_gt_is_all_background() {
        let set = generate_default_boxes(&desk_dims(), 0.2, 0.9, 6).unwrap();
        let res = match_boxes(set.corners(), &[], 0.5).unwrap();
        assert!(res.assignment.iter().all(|a| a.is_none()));
        assert_eq!(res.positive_count(), 0);
    }

    #[test]
    fn every_gt_gets_a_default_even_below_threshold() {
        // a tiny gt overlapping nothing above 0.5 still claims one box
        let set = generate_default_boxes(&desk_dims(), 0.2, 0.9, 6).unwrap();
        let gt = BoxXyxy::new(0.001, 0.001, 0.012, 0.012);
        let res = match_boxes(set.corners(), &[gt], 0.5).unwrap();
        assert_eq!(res.positive_count(), 1);
        assert_eq!(res.assignment[res.best_default[0]], Some(0));
    }

    /// Order-independent reference matcher: phase one repeatedly takes
    /// the maximum IoU over all remaining pairs, resolving ties by the
    /// smallest default index then smallest gt index; phase two scans
    /// thresholds directly.
    fn oracle_match(defaults: &[BoxXyxy], gts: &[BoxXyxy], thr: f64) -> Vec<Option<usize>> {
        let n = defaults.len();
        let m = gts.len();
        let mut assignment = vec![None; n];
        let mut gt_done = vec![false; m];
        for _ in 0..m {
            let mut best = -1.0;
            for d in 0..n {
                for g in 0..m {
                    if assignment[d].is_none() && !gt_done[g] {
                        best = f64::max(best, iou(&defaults[d], &gts[g]));
                    }
                }
            }
            let mut pick = None;
            'outer: for d in 0..n {
                for g in 0..m {
                    if assignment[d].is_none() && !gt_done[g] && iou(&defaults[d], &gts[g]) == best {
                        pick = Some((d, g));
                        break 'outer;
                    }
                }
            }
            let (d, g) = pick.unwrap();
            assignment[d] = Some(g);
            gt_done[g] = true;
        }
        for d in 0..n {
            if assignment[d].is_some() {
                continue;
            }
            let mut best_g = None;
            let mut best_v = f64::NEG_INFINITY;
            for g in 0..m {
                let v = iou(&defaults[d], &gts[g]);
                if v > best_v {
                    best_v = v;
                    best_g = Some(g);
                }
            }
            if best_v >= thr {
                assignment[d] = best_g;
            }
        }
        assignment
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BoxXyxy {
        let x1: f64 = rng.random_range(0.0..0.7);
        let y1: f64 = rng.random_range(0.0..0.7);
        let w: f64 = rng.random_range(0.05..0.3);
        let h: f64 = rng.random_range(0.05..0.3);
        BoxXyxy::new(x1, y1, (x1 + w).min(1.0), (y1 + h).min(1.0))
    }

    #[test]
    fn matching_equals_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let nd = rng.random_range(5..20);
            let ng = rng.random_range(1..4);
            let defaults: Vec<BoxXyxy> = (0..nd).map(|_| random_box(&mut rng)).collect();
            let gts: Vec<BoxXyxy> = (0..ng).map(|_| random_box(&mut rng)).collect();
            let got = match_boxes(&defaults, &gts, 0.5).unwrap();
            let want = oracle_match(&defaults, &gts, 0.5);
            assert_eq!(got.assignment, want);
        }
    }

    #[test]
    fn encode_identity_is_exact_zero() {
        let d = BoxCw { cx: 0.3, cy: 0.4, w: 0.2, h: 0.25 };
        let t = encode(&d, &d, VARIANCES);
        assert_eq!(t, [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_log_width_ratio() {
        let d = BoxCw { cx: 0.5, cy: 0.5, w: 0.2, h: 0.2 };
        let g = BoxCw { cx: 0.5, cy: 0.5, w: 0.2 * 0.2f64.exp(), h: 0.2 };
        let t = encode(&g, &d, VARIANCES);
        assert!((t[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decode_zero_returns_default() {
        let d = BoxCw { cx: 0.3, cy: 0.4, w: 0.2, h: 0.25 };
        let b = decode(&[0.0; 4], &d, VARIANCES);
        assert_eq!(b, d);
    }

    #[test]
    fn decode_log2_over_variance_doubles_width() {
        let d = BoxCw { cx: 0.5, cy: 0.5, w: 0.2, h: 0.2 };
        let b = decode(&[0.0, 0.0, 2.0f64.ln() / VARIANCES.1, 0.0], &d, VARIANCES);
        assert!((b.w - 0.4).abs() < 1e-12);
    }

    #[test]
    fn codec_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let b = random_box(&mut rng).to_center();
            let d = random_box(&mut rng).to_center();
            let t = encode(&b, &d, VARIANCES);
            let back = decode(&t, &d, VARIANCES);
            for (got, want) in [
                (back.cx, b.cx),
                (back.cy, b.cy),
                (back.w, b.w),
                (back.h, b.h),
            ] {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nms_identical_boxes_keep_best() {
        let b = BoxXyxy::new(0.1, 0.1, 0.3, 0.3);
        let dets = vec![
            Detection { class: 0, score: 0.8, bbox: b },
            Detection { class: 0, score: 0.9, bbox: b },
        ];
        let kept = nms(&dets, 0.45, 200);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_disjoint_boxes_all_survive() {
        let dets = vec![
            Detection { class: 0, score: 0.9, bbox: BoxXyxy::new(0.0, 0.0, 0.2, 0.2) },
            Detection { class: 0, score: 0.5, bbox: BoxXyxy::new(0.5, 0.5, 0.7, 0.7) },
            Detection { class: 0, score: 0.1, bbox: BoxXyxy::new(0.8, 0.0, 0.9, 0.2) },
        ];
        assert_eq!(nms(&dets, 0.45, 200).len(), 3);
    }

    /// Reference NMS built on the full pairwise IoU matrix.
    fn oracle_nms(dets: &[Detection], thr: f64, top_k: usize) -> Vec<Detection> {
        let n = dets.len();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = iou(&dets[i].bbox, &dets[j].bbox);
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        order.truncate(top_k);
        let mut kept: Vec<usize> = Vec::new();
        for &i in &order {
            if kept.iter().all(|&k| m[k * n + i] <= thr) {
                kept.push(i);
            }
        }
        kept.into_iter().map(|i| dets[i].clone()).collect()
    }

    #[test]
    fn nms_equals_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let n = rng.random_range(0..20);
            let dets: Vec<Detection> = (0..n)
                .map(|_| Detection {
                    class: 0,
                    // quantized scores so ties actually occur
                    score: (rng.random_range(0..10) as f64) / 10.0,
                    bbox: random_box(&mut rng),
                })
                .collect();
            let got = nms(&dets, 0.45, 200);
            let want = oracle_nms(&dets, 0.45, 200);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn nms_respects_top_k() {
        let dets: Vec<Detection> = (0..5)
            .map(|i| Detection {
                class: 0,
                score: 0.1 * (i as f64 + 1.0),
                bbox: BoxXyxy::new(0.19 * i as f64, 0.0, 0.19 * i as f64 + 0.1, 0.1),
            })
            .collect();
        assert_eq!(nms(&dets, 0.45, 2).len(), 2);
    }

    #[test]
    fn box_in_box_single_detection_is_zero() {
        let dets = vec![Detection { class: 0, score: 0.9, bbox: BoxXyxy::new(0.1, 0.1, 0.3, 0.3) }];
        assert_eq!(box_in_box_rate(&dets, 0.9), 0.0);
    }

    #[test]
    fn box_in_box_containment_counts() {
        let dets = vec![
            Detection { class: 1, score: 0.9, bbox: BoxXyxy::new(0.1, 0.1, 0.5, 0.5) },
            Detection { class: 1, score: 0.8, bbox: BoxXyxy::new(0.2, 0.2, 0.3, 0.3) },
        ];
        assert_eq!(box_in_box_rate(&dets, 0.9), 1.0);
    }

    #[test]
    fn box_in_box_ten_box_fixture() {
        // three big boxes each containing one small box; four isolated
        // boxes; all one class -> 3 contained pairs out of C(10,2)=45
        let mut dets = Vec::new();
        for i in 0..3 {
            let x = 0.05 + 0.3 * i as f64;
            dets.push(Detection { class: 0, score: 0.9, bbox: BoxXyxy::new(x, 0.05, x + 0.2, 0.25) });
            dets.push(Detection { class: 0, score: 0.8, bbox: BoxXyxy::new(x + 0.05, 0.1, x + 0.15, 0.2) });
        }
        for i in 0..4 {
            let x = 0.02 + 0.25 * i as f64;
            dets.push(Detection { class: 0, score: 0.7, bbox: BoxXyxy::new(x, 0.6, x + 0.1, 0.7) });
        }
        assert_eq!(dets.len(), 10);
        let rate = box_in_box_rate(&dets, 0.9);
        assert!((rate - 3.0 / 45.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_rate_splits_pairs_by_image_and_score() {
        let nested_pair = |img: &str, score: f64| {
            vec![
                DetRecord {
                    image_id: img.to_string(),
                    det: Detection { class: 0, score, bbox: BoxXyxy::new(0.1, 0.1, 0.5, 0.5) },
                },
                DetRecord {
                    image_id: img.to_string(),
                    det: Detection { class: 0, score, bbox: BoxXyxy::new(0.2, 0.2, 0.4, 0.4) },
                },
            ]
        };
        // image a: one contained pair; image b: the same two boxes but the
        // nested one falls under the score gate, leaving no pair at all
        let mut records = nested_pair("a", 0.9);
        records.extend(nested_pair("b", 0.9));
        records[3].det.score = 0.2;
        // a third far-apart detection in image a adds two uncontained pairs
        records.push(DetRecord {
            image_id: "a".to_string(),
            det: Detection { class: 0, score: 0.9, bbox: BoxXyxy::new(0.6, 0.6, 0.9, 0.9) },
        });
        let rate = box_in_box_rate_pooled(&records, 0.9, 0.5);
        assert!((rate - 1.0 / 3.0).abs() < 1e-12);
        // with no score gate, image b contributes its contained pair: 2/4
        let rate = box_in_box_rate_pooled(&records, 0.9, 0.0);
        assert!((rate - 0.5).abs() < 1e-12);
        assert_eq!(box_in_box_rate_pooled(&[], 0.9, 0.5), 0.0);
    }

    #[test]
    fn dump_round_trips() {
        let records = vec![
            DetRecord {
                image_id: "img_000001".to_string(),
                det: Detection { class: 2, score: 0.875, bbox: BoxXyxy::new(0.125, 0.25, 0.5, 0.75) },
            },
            DetRecord {
                image_id: "img_000002".to_string(),
                det: Detection { class: 0, score: 0.5, bbox: BoxXyxy::new(0.0, 0.0, 1.0, 1.0) },
            },
        ];
        let mut buf = Vec::new();
        write_detections(&mut buf, &records).unwrap();
        let back = read_detections(&buf[..]).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn dump_rejects_short_lines() {
        let r = read_detections("img 0 0.5 0.1 0.1 0.2".as_bytes());
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
