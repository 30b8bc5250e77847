//! Box/class prediction heads and the anchor flattening layout.
//!
//! Every pyramid level is predicted from by a single 3x3 conv that maps
//! the level's depth to `A*(4 + C+1)` channels: per anchor slot, 4 box
//! offsets followed by C+1 class logits (background is class 0). In
//! unified mode one parameter set serves every level — which requires
//! all levels to share one depth — while separate mode owns one set per
//! level. Anchor rows flatten in (level, row, column, anchor) order;
//! the default-box grid, the loss, and the decoder all follow it.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weight std for the prediction conv. Small and fixed — not fan-in
/// scaled — so the initial class distribution is near uniform even on
/// the L2Norm level, whose rescaled features would otherwise blow the
/// starting logits (and the first few hundred steps) up.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Unified,
    Separate,
}

impl FromStr for HeadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(HeadMode::Unified),
            "separate" => Ok(HeadMode::Separate),
            other => Err(Error::config(format!(
                "unknown head mode '{}', expected unified|separate",
                other
            ))),
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Unified => "unified",
            HeadMode::Separate => "separate",
        })
    }
}

/// Where each flattened anchor row lives: its pyramid level, grid cell,
/// and anchor slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorPos {
    pub level: usize,
    pub i: usize,
    pub j: usize,
    pub slot: usize,
}

/// Maps global anchor rows (the default-box order) to channel positions
/// inside the per-level raw head outputs.
#[derive(Debug, Clone)]
pub struct AnchorLayout {
    level_dims: Vec<(usize, usize)>,
    /// First global row of each level, plus the total as a sentinel.
    offsets: Vec<usize>,
    anchors_per_loc: usize,
    num_classes: usize,
}

impl AnchorLayout {
    pub fn new(level_dims: &[(usize, usize)], anchors_per_loc: usize, num_classes: usize) -> Self {
        let mut offsets = vec![0];
        for &(h, w) in level_dims {
            offsets.push(offsets.last().unwrap() + h * w * anchors_per_loc);
        }
        AnchorLayout {
            level_dims: level_dims.to_vec(),
            offsets,
            anchors_per_loc,
            num_classes,
        }
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn num_levels(&self) -> usize {
        self.level_dims.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn anchors_per_loc(&self) -> usize {
        self.anchors_per_loc
    }

    /// Channels per anchor slot in the raw head output: 4 offsets plus
    /// C+1 logits.
    pub fn chans_per_anchor(&self) -> usize {
        4 + self.num_classes + 1
    }

    pub fn rows_of_level(&self, level: usize) -> std::ops::Range<usize> {
        self.offsets[level]..self.offsets[level + 1]
    }

    pub fn level_of(&self, row: usize) -> usize {
        debug_assert!(row < self.total());
        self.offsets.partition_point(|&o| o <= row) - 1
    }

    pub fn locate(&self, row: usize) -> AnchorPos {
        let level = self.level_of(row);
        let within = row - self.offsets[level];
        let (_, w) = self.level_dims[level];
        let cell = within / self.anchors_per_loc;
        AnchorPos {
            level,
            i: cell / w,
            j: cell % w,
            slot: within % self.anchors_per_loc,
        }
    }

    fn chan_base(&self, pos: &AnchorPos, batch_item: usize) -> (usize, usize) {
        let (h, w) = self.level_dims[pos.level];
        let per = self.chans_per_anchor();
        let chans = self.anchors_per_loc * per;
        let pix = pos.i * w + pos.j;
        let base = (batch_item * chans + pos.slot * per) * h * w + pix;
        (base, h * w)
    }

    /// Flat positions of the 4 offset channels of one anchor row inside
    /// its level's raw output tensor.
    pub fn loc_flat(&self, row: usize, batch_item: usize) -> [u32; 4] {
        let pos = self.locate(row);
        let (base, plane) = self.chan_base(&pos, batch_item);
        [0, 1, 2, 3].map(|q| (base + q * plane) as u32)
    }

    /// Flat positions of the C+1 logit channels of one anchor row,
    /// background first.
    pub fn conf_flat(&self, row: usize, batch_item: usize) -> Vec<u32> {
        let pos = self.locate(row);
        let (base, plane) = self.chan_base(&pos, batch_item);
        (4..self.chans_per_anchor())
            .map(|q| (base + q * plane) as u32)
            .collect()
    }
}

/// Parameter handles for the prediction heads: one (weight, bias) pair
/// in unified mode, one per level in separate mode.
pub struct Heads {
    mode: HeadMode,
    sets: Vec<(ParamId, ParamId)>,
    in_depths: Vec<usize>,
    anchors_per_loc: usize,
    num_classes: usize,
}

impl Heads {
    pub fn new<S: Scalar>(
        mode: HeadMode,
        in_depths: &[usize],
        anchors_per_loc: usize,
        num_classes: usize,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if in_depths.is_empty() {
            return Err(Error::config("heads need at least one level".to_string()));
        }
        if anchors_per_loc == 0 || num_classes == 0 {
            return Err(Error::config(
                "anchors per location and class count must be positive".to_string(),
            ));
        }
        let out_c = anchors_per_loc * (4 + num_classes + 1);
        let mut sets = Vec::new();
        match mode {
            HeadMode::Unified => {
                let d = in_depths[0];
                if in_depths.iter().any(|&x| x != d) {
                    return Err(Error::config(format!(
                        "unified head requires one common level depth, got {:?}",
                        in_depths
                    )));
                }
                sets.push((
                    store.add(
                        "head.shared.conv.weight",
                        Tensor::randn(&[out_c, d, 3, 3], HEAD_INIT_STD, rng),
                    ),
                    store.add("head.shared.conv.bias", Tensor::zeros(&[out_c])),
                ));
            }
            HeadMode::Separate => {
                for (l, &d) in in_depths.iter().enumerate() {
                    sets.push((
                        store.add(
                            format!("head.level{}.conv.weight", l + 1),
                            Tensor::randn(&[out_c, d, 3, 3], HEAD_INIT_STD, rng),
                        ),
                        store.add(format!("head.level{}.conv.bias", l + 1), Tensor::zeros(&[out_c])),
                    ));
                }
            }
        }
        Ok(Heads {
            mode,
            sets,
            in_depths: in_depths.to_vec(),
            anchors_per_loc,
            num_classes,
        })
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    fn set_for_level(&self, level: usize) -> (ParamId, ParamId) {
        match self.mode {
            HeadMode::Unified => self.sets[0],
            HeadMode::Separate => self.sets[level],
        }
    }

    /// Run the head conv on every level tensor; returns the raw
    /// `B x A*(4+C+1) x H x W` prediction of each level.
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        store: &ParamStore<S>,
        levels: &[Var<'t, S>],
    ) -> Result<Vec<Var<'t, S>>> {
        if levels.len() != self.in_depths.len() {
            return Err(Error::config(format!(
                "heads built for {} levels, got {}",
                self.in_depths.len(),
                levels.len()
            )));
        }
        let mut out = Vec::new();
        for (l, lvl) in levels.iter().enumerate() {
            let c = lvl.shape()[1];
            if c != self.in_depths[l] {
                return Err(Error::config(format!(
                    "level {} head expects depth {}, tensor has {}",
                    l + 1,
                    self.in_depths[l],
                    c
                )));
            }
            let (w, b) = self.set_for_level(l);
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            out.push(lvl.conv2d(wv, Some(bv), 1, 1)?);
        }
        Ok(out)
    }

    /// Total scalar parameters across all head sets.
    pub fn parameter_count(&self) -> usize {
        let out_c = self.anchors_per_loc * (4 + self.num_classes + 1);
        self.sets
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let d = match self.mode {
                    HeadMode::Unified => self.in_depths[0],
                    HeadMode::Separate => self.in_depths[i],
                };
                out_c * d * 9 + out_c
            })
            .sum()
    }
}

/// Split a raw head output into the documented loc / conf views:
/// `B x A*4 x H x W` offsets and `B x A*(C+1) x H x W` logits.
pub fn split_loc_conf<S: Scalar>(
    raw: &Tensor<S>,
    anchors_per_loc: usize,
    num_classes: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (b, c, h, w) = raw.dims4()?;
    let per = 4 + num_classes + 1;
    if c != anchors_per_loc * per {
        return Err(Error::dim(format!(
            "raw prediction has {} channels, expected {}",
            c,
            anchors_per_loc * per
        )));
    }
    let plane = h * w;
    let mut loc = Tensor::zeros(&[b, anchors_per_loc * 4, h, w]);
    let mut conf = Tensor::zeros(&[b, anchors_per_loc * (num_classes + 1), h, w]);
    for bi in 0..b {
        for a in 0..anchors_per_loc {
            for q in 0..per {
                let src = ((bi * c) + a * per + q) * plane;
                let dst = if q < 4 {
                    ((bi * anchors_per_loc * 4) + a * 4 + q) * plane
                } else {
                    ((bi * anchors_per_loc * (num_classes + 1)) + a * (num_classes + 1) + (q - 4))
                        * plane
                };
                let target = if q < 4 { loc.data_mut() } else { conf.data_mut() };
                target[dst..dst + plane].copy_from_slice(&raw.data()[src..src + plane]);
            }
        }
    }
    Ok((loc, conf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn desk_dims() -> Vec<(usize, usize)> {
        vec![(16, 16), (8, 8), (4, 4), (2, 2)]
    }

    #[test]
    fn layout_covers_the_grid_in_order() {
        let lay = AnchorLayout::new(&desk_dims(), 6, 3);
        assert_eq!(lay.total(), 2040);
        assert_eq!(lay.rows_of_level(0), 0..1536);
        assert_eq!(lay.rows_of_level(3), 2016..2040);
        // first row: level 0, cell (0,0), slot 0
        assert_eq!(lay.locate(0), AnchorPos { level: 0, i: 0, j: 0, slot: 0 });
        // row 6 starts the next cell in the same grid row
        assert_eq!(lay.locate(6), AnchorPos { level: 0, i: 0, j: 1, slot: 0 });
        // last row: level 3, cell (1,1), slot 5
        assert_eq!(lay.locate(2039), AnchorPos { level: 3, i: 1, j: 1, slot: 5 });
    }

    #[test]
    fn flat_indices_address_the_right_channels() {
        let lay = AnchorLayout::new(&desk_dims(), 6, 3);
        // level 0 is 16x16 with 48 channels; row for cell (2,3) slot 1
        let row = (2 * 16 + 3) * 6 + 1;
        let plane = 256;
        let loc = lay.loc_flat(row, 0);
        let pix = 2 * 16 + 3;
        assert_eq!(loc[0] as usize, 8 * plane + pix);
        assert_eq!(loc[3] as usize, 11 * plane + pix);
        let conf = lay.conf_flat(row, 0);
        assert_eq!(conf.len(), 4);
        assert_eq!(conf[0] as usize, 12 * plane + pix);
        assert_eq!(conf[3] as usize, 15 * plane + pix);
        // batch item 1 shifts by the whole item stride
        let loc_b1 = lay.loc_flat(row, 1);
        assert_eq!(loc_b1[0] as usize, (48 + 8) * plane + pix);
    }

    fn build_heads(
        mode: HeadMode,
        depths: &[usize],
    ) -> (Heads, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let heads = Heads::new(mode, depths, 6, 3, &mut store, &mut rng).unwrap();
        (heads, store)
    }

    #[test]
    fn forward_output_shapes() {
        let (heads, store) = build_heads(HeadMode::Unified, &[32, 32, 32, 32]);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let levels: Vec<_> = desk_dims()
            .iter()
            .map(|&(h, w)| tape.input(Tensor::randn(&[1, 32, h, w], 1.0, &mut rng)))
            .collect();
        let out = heads.forward(&tape, &store, &levels).unwrap();
        for (o, &(h, w)) in out.iter().zip(&desk_dims()) {
            assert_eq!(o.shape(), vec![1, 48, h, w]);
        }
        let total: usize = out
            .iter()
            .map(|o| o.shape()[2] * o.shape()[3] * 6)
            .sum();
        assert_eq!(total, 2040);
    }

    #[test]
    fn unified_head_is_the_same_function_on_every_level() {
        let (heads, store) = build_heads(HeadMode::Unified, &[32, 32, 32, 32]);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::randn(&[1, 32, 4, 4], 1.0, &mut rng);
        // the same tensor fed through every level slot
        let levels: Vec<_> = (0..4).map(|_| tape.input(t.clone())).collect();
        let out = heads.forward(&tape, &store, &levels).unwrap();
        for pair in out.windows(2) {
            for (a, b) in pair[0].value().data().iter().zip(pair[1].value().data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_loc_uniform_conf() {
        let (heads, store) = build_heads(HeadMode::Unified, &[32, 32, 32, 32]);
        let tape = Tape::new();
        let levels: Vec<_> = desk_dims()
            .iter()
            .map(|&(h, w)| tape.input(Tensor::zeros(&[1, 32, h, w])))
            .collect();
        let out = heads.forward(&tape, &store, &levels).unwrap();
        let (loc, conf) = split_loc_conf(&out[0].value_clone(), 6, 3).unwrap();
        assert!(loc.data().iter().all(|&v| v == 0.0));
        // zero logits soften to a uniform distribution
        let probs: Vec<f64> = conf.data()[..4].iter().map(|&z: &f64| z.exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in probs {
            assert!((p / z - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn unified_needs_common_depth() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = Heads::new(HeadMode::Unified, &[32, 64, 64, 64], 6, 3, &mut store, &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn separate_heads_accept_mixed_depths() {
        let (heads, store) = build_heads(HeadMode::Separate, &[32, 64, 64, 64]);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = desk_dims();
        let depths = [32usize, 64, 64, 64];
        let levels: Vec<_> = dims
            .iter()
            .zip(depths)
            .map(|(&(h, w), d)| tape.input(Tensor::randn(&[1, d, h, w], 1.0, &mut rng)))
            .collect();
        let out = heads.forward(&tape, &store, &levels).unwrap();
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn depth_mismatch_at_forward_is_config_error() {
        let (heads, store) = build_heads(HeadMode::Unified, &[32, 32, 32, 32]);
        let tape = Tape::new();
        let levels: Vec<_> = desk_dims()
            .iter()
            .map(|&(h, w)| tape.input(Tensor::zeros(&[1, 64, h, w])))
            .collect();
        assert!(matches!(
            heads.forward(&tape, &store, &levels),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn parameter_counts() {
        let (unified, _) = build_heads(HeadMode::Unified, &[32, 32, 32, 32]);
        assert_eq!(unified.parameter_count(), 13_872);
        let (separate, _) = build_heads(HeadMode::Separate, &[32, 32, 32, 32]);
        assert_eq!(separate.parameter_count(), 4 * 13_872);
        let (single, _) = build_heads(HeadMode::Separate, &[32]);
        let (single_u, _) = build_heads(HeadMode::Unified, &[32]);
        assert_eq!(single.parameter_count(), single_u.parameter_count());
    }

    #[test]
    fn shared_gradient_is_sum_of_per_level_contributions() {
        let (heads, mut store) = build_heads(HeadMode::Unified, &[8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t1 = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut rng);
        let t2 = Tensor::randn(&[1, 8, 2, 2], 1.0, &mut rng);
        let wid = store.find("head.shared.conv.weight").unwrap();

        let grad_for = |use1: bool, use2: bool, store: &ParamStore<f64>| {
            let tape = Tape::new();
            let l1 = tape.input(t1.clone());
            let l2 = tape.input(t2.clone());
            let out = heads.forward(&tape, store, &[l1, l2]).unwrap();
            let mut parts = Vec::new();
            if use1 {
                parts.push(out[0].smooth_l1_at(vec![(0, 0.3), (5, -0.2)]).unwrap());
            }
            if use2 {
                parts.push(out[1].smooth_l1_at(vec![(1, 0.1)]).unwrap());
            }
            let mut loss = parts[0];
            for p in &parts[1..] {
                loss = loss.add(*p).unwrap();
            }
            let map = tape.backward(loss, store.len()).unwrap();
            map.get(wid).unwrap().clone()
        };

        let both = grad_for(true, true, &store);
        let only1 = grad_for(true, false, &store);
        let only2 = grad_for(false, true, &store);
        store.zero_grad();
        for i in 0..both.len() {
            let sum = only1.data()[i] + only2.data()[i];
            assert!((both.data()[i] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn split_views_have_documented_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = Tensor::<f64>::randn(&[2, 48, 4, 4], 1.0, &mut rng);
        let (loc, conf) = split_loc_conf(&raw, 6, 3).unwrap();
        assert_eq!(loc.shape(), &[2, 24, 4, 4]);
        assert_eq!(conf.shape(), &[2, 24, 4, 4]);
        // anchor 2's first loc channel is raw channel 16
        let plane = 16;
        for pix in 0..plane {
            assert_eq!(loc.data()[(2 * 4) * plane + pix], raw.data()[(2 * 8) * plane + pix]);
            assert_eq!(conf.data()[(2 * 4) * plane + pix], raw.data()[(2 * 8 + 4) * plane + pix]);
        }
    }
}
