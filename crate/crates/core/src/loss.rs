//! Multibox training objective: smooth-L1 on matched anchors' box
//! offsets plus softmax cross-entropy on matched anchors and hard-mined
//! background anchors at a 3:1 negative:positive ratio.

use crate::boxes::{encode, DefaultBoxSet, GtBox, MatchResult, VARIANCES};
use crate::error::{Error, Result};
use crate::heads::AnchorLayout;
use crate::scalar::Scalar;
use crate::tape::{CeGroup, Tape, Var};
use crate::tensor::Tensor;

pub const NEGATIVE_RATIO: usize = 3;

/// One matched anchor: its global row, the gt class (0-based; the conf
/// target is `class + 1` since background owns index 0), and the
/// variance-scaled offsets it should regress to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveAnchor {
    pub row: usize,
    pub class: usize,
    pub loc_target: [f64; 4],
}

/// The anchors a loss evaluation will touch. Selection is decided from
/// forward values only, so the differentiable part can be re-evaluated
/// under perturbation without the choice shifting.
#[derive(Debug, Clone, Default)]
pub struct LossSelection {
    pub positives: Vec<PositiveAnchor>,
    pub negatives: Vec<usize>,
}

/// Loss node plus the raw (unnormalized) component sums for logging.
pub struct MultiboxLoss<'t, S: Scalar> {
    pub total: Var<'t, S>,
    pub loc: f64,
    pub conf: f64,
    pub num_positives: usize,
    pub num_negatives: usize,
}

fn background_ce<S: Scalar>(logits: &[S]) -> f64 {
    let m = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let sum: S = logits.iter().map(|&z| (z - m).exp()).sum();
    (m + sum.ln() - logits[0]).tof()
}

/// Decide which anchors the loss touches: every matched anchor is a
/// positive; the hardest non-positives by background cross-entropy are
/// negatives, at most `NEGATIVE_RATIO` per positive, ties keeping the
/// lower anchor row.
pub fn select_training_anchors<S: Scalar>(
    layout: &AnchorLayout,
    preds: &[Var<'_, S>],
    defaults: &DefaultBoxSet,
    matches: &MatchResult,
    gts: &[GtBox],
    batch_item: usize,
) -> Result<LossSelection> {
    if matches.assignment.len() != layout.total() {
        return Err(Error::contract(format!(
            "match table covers {} anchors, layout has {}",
            matches.assignment.len(),
            layout.total()
        )));
    }
    let mut positives = Vec::new();
    for (row, assigned) in matches.assignment.iter().enumerate() {
        if let Some(g) = *assigned {
            let gt = &gts[g];
            let t = encode(&gt.bbox.to_center(), defaults.center(row), VARIANCES);
            positives.push(PositiveAnchor { row, class: gt.class, loc_target: t });
        }
    }

    let budget = NEGATIVE_RATIO * positives.len();
    let mut negatives = Vec::new();
    if budget > 0 {
        let values: Vec<_> = preds.iter().map(|p| p.value()).collect();
        let mut pool: Vec<(usize, f64)> = Vec::new();
        for row in 0..layout.total() {
            if matches.assignment[row].is_some() {
                continue;
            }
            let idxs = layout.conf_flat(row, batch_item);
            let level = layout.level_of(row);
            let data = values[level].data();
            let logits: Vec<S> = idxs.iter().map(|&i| data[i as usize]).collect();
            pool.push((row, background_ce(&logits)));
        }
        // total_cmp keeps the sort deterministic even when a diverging
        // run pushes cross-entropies to infinity or NaN
        pool.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        negatives = pool.iter().take(budget).map(|&(row, _)| row).collect();
    }
    Ok(LossSelection { positives, negatives })
}

/// Build the loss graph for a fixed anchor selection.
pub fn multibox_loss_with_selection<'t, S: Scalar>(
    tape: &'t Tape<S>,
    layout: &AnchorLayout,
    preds: &[Var<'t, S>],
    selection: &LossSelection,
    batch_item: usize,
) -> Result<MultiboxLoss<'t, S>> {
    let n = selection.positives.len();
    if selection.negatives.len() > NEGATIVE_RATIO * n {
        return Err(Error::contract(format!(
            "{} negatives exceeds the {}:1 budget for {} positives",
            selection.negatives.len(),
            NEGATIVE_RATIO,
            n
        )));
    }
    let k = layout.num_levels();

    let mut loc_entries: Vec<Vec<(u32, S)>> = vec![Vec::new(); k];
    for p in &selection.positives {
        let level = layout.level_of(p.row);
        let idxs = layout.loc_flat(p.row, batch_item);
        for q in 0..4 {
            loc_entries[level].push((idxs[q], S::fromf(p.loc_target[q])));
        }
    }

    let mut conf_groups: Vec<Vec<CeGroup>> = vec![Vec::new(); k];
    for p in &selection.positives {
        conf_groups[layout.level_of(p.row)].push(CeGroup {
            idxs: layout.conf_flat(p.row, batch_item),
            target: (p.class + 1) as u32,
        });
    }
    for &row in &selection.negatives {
        conf_groups[layout.level_of(row)].push(CeGroup {
            idxs: layout.conf_flat(row, batch_item),
            target: 0,
        });
    }

    let mut loc_node: Option<Var<'t, S>> = None;
    let mut conf_node: Option<Var<'t, S>> = None;
    for l in 0..k {
        if !loc_entries[l].is_empty() {
            let part = preds[l].smooth_l1_at(std::mem::take(&mut loc_entries[l]))?;
            loc_node = Some(match loc_node {
                Some(acc) => acc.add(part)?,
                None => part,
            });
        }
        if !conf_groups[l].is_empty() {
            let part = preds[l].softmax_ce_groups(std::mem::take(&mut conf_groups[l]))?;
            conf_node = Some(match conf_node {
                Some(acc) => acc.add(part)?,
                None => part,
            });
        }
    }

    let loc = loc_node.map_or(0.0, |v| v.value().item().tof());
    let conf = conf_node.map_or(0.0, |v| v.value().item().tof());
    let raw = match (loc_node, conf_node) {
        (Some(a), Some(b)) => a.add(b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => tape.constant(Tensor::scalar(S::zero())),
    };
    let total = raw.affine(S::fromf(1.0 / n.max(1) as f64), S::zero());

    Ok(MultiboxLoss {
        total,
        loc,
        conf,
        num_positives: n,
        num_negatives: selection.negatives.len(),
    })
}

/// Full objective: match-driven selection followed by graph building.
pub fn multibox_loss<'t, S: Scalar>(
    tape: &'t Tape<S>,
    layout: &AnchorLayout,
    preds: &[Var<'t, S>],
    defaults: &DefaultBoxSet,
    matches: &MatchResult,
    gts: &[GtBox],
    batch_item: usize,
) -> Result<MultiboxLoss<'t, S>> {
    let selection = select_training_anchors(layout, preds, defaults, matches, gts, batch_item)?;
    multibox_loss_with_selection(tape, layout, preds, &selection, batch_item)
}
