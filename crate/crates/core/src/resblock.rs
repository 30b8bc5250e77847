//! Residual feature-enrichment blocks.
//!
//! Each pyramid level is rebuilt as a sum of small branches instead of
//! being predicted from directly: branch1 is a cheap 1x1 projection,
//! branch2 a 1x1 -> 3x3 bottleneck for local context, and (in 3-way
//! mode) branch3 lifts the next-coarser *backbone* map through a
//! stride-2 deconvolution. The top level never has a branch3. All
//! branches end at a common depth, which is what lets a single unified
//! head serve every level, and they put at least one learned conv
//! between the heads and the backbone so prediction gradients cannot
//! reach the feature extractor directly.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Output depth used at desk scale.
pub const DESK_DEPTH: usize = 32;
/// Depth the architecture uses at full scale.
pub const PAPER_DEPTH: usize = 256;
/// Weight std for each branch's closing conv. Kept near zero so a
/// freshly built block barely perturbs branch1's pass-through.
pub const CLOSING_CONV_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResMode {
    /// No enrichment: heads read the backbone pyramid directly.
    None,
    TwoWay,
    ThreeWay,
}

impl FromStr for ResMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ResMode::None),
            "2way" => Ok(ResMode::TwoWay),
            "3way" => Ok(ResMode::ThreeWay),
            other => Err(Error::config(format!(
                "unknown resblock mode '{}', expected none|2way|3way",
                other
            ))),
        }
    }
}

impl fmt::Display for ResMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResMode::None => "none",
            ResMode::TwoWay => "2way",
            ResMode::ThreeWay => "3way",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlockConfig {
    pub mode: ResMode,
    /// Common output depth D of every branch; must be even (branch2
    /// bottlenecks through D/2).
    pub depth: usize,
    pub branch1: bool,
    pub branch2: bool,
    pub branch3: bool,
    /// Apply a ReLU to each summed output. Off by default so branch3's
    /// linear tail can push signed corrections into the sum.
    pub post_sum_relu: bool,
}

impl Default for ResBlockConfig {
    fn default() -> Self {
        ResBlockConfig {
            mode: ResMode::ThreeWay,
            depth: DESK_DEPTH,
            branch1: true,
            branch2: true,
            branch3: true,
            post_sum_relu: false,
        }
    }
}

impl ResBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == ResMode::None {
            return Err(Error::config(
                "resblock built with mode none; skip construction instead".to_string(),
            ));
        }
        if self.depth < 2 || self.depth % 2 != 0 {
            return Err(Error::config(format!(
                "resblock depth must be even and >= 2, got {}",
                self.depth
            )));
        }
        if !self.branch1 && !self.branch2 {
            return Err(Error::config(
                "at least one of branch1/branch2 must be enabled".to_string(),
            ));
        }
        Ok(())
    }
}

struct Branch1 {
    w: ParamId,
    b: ParamId,
}

struct Branch2 {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

struct Branch3 {
    deconv_w: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
}

struct LevelParams {
    b1: Option<Branch1>,
    b2: Option<Branch2>,
    b3: Option<Branch3>,
}

/// Parameter handles for the per-level branch sets.
pub struct ResBlock {
    config: ResBlockConfig,
    levels: Vec<LevelParams>,
}

/// The enriched feature maps, all at the block's common depth.
pub struct ResidualPyramid<'t, S: Scalar> {
    pub levels: Vec<Var<'t, S>>,
    pub mode: ResMode,
}

impl ResBlock {
    /// Register branch parameters for every pyramid level.
    /// `source_shapes` is (spatial side, channels) per level, shallowest
    /// first, as reported by the backbone config.
    pub fn new<S: Scalar>(
        config: ResBlockConfig,
        source_shapes: &[(usize, usize)],
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let k = source_shapes.len();
        if k < 2 {
            return Err(Error::config("resblock needs at least 2 pyramid levels".to_string()));
        }
        if config.mode == ResMode::ThreeWay {
            for l in 0..k - 1 {
                // kernel-2 stride-2 deconv turns H into exactly 2H
                if source_shapes[l].0 != 2 * source_shapes[l + 1].0 {
                    return Err(Error::config(format!(
                        "level {} deconv would produce spatial {} but level {} has {}",
                        l + 2,
                        2 * source_shapes[l + 1].0,
                        l + 1,
                        source_shapes[l].0
                    )));
                }
            }
        }
        let d = config.depth;
        let mut levels = Vec::new();
        for (l, &(_, c_l)) in source_shapes.iter().enumerate() {
            let name = |part: &str| format!("resblock.level{}.{}", l + 1, part);
            // Folded identity: input channel c lands on output c mod d.
            // Sources are post-ReLU (non-negative), so branch1 starts as
            // an exact pass-through and the heads see backbone-like
            // features from step 0 instead of a random projection.
            let mut fold = vec![S::zero(); d * c_l];
            for c in 0..c_l {
                fold[(c % d) * c_l + c] = S::one();
            }
            let b1 = config.branch1.then(|| Branch1 {
                w: store.add(
                    name("branch1.conv.weight"),
                    Tensor::from_vec(&[d, c_l, 1, 1], fold.clone()).unwrap(),
                ),
                b: store.add(name("branch1.conv.bias"), Tensor::zeros(&[d])),
            });
            let b2 = config.branch2.then(|| Branch2 {
                w1: store.add(
                    name("branch2.conv1.weight"),
                    Tensor::randn(&[d / 2, c_l, 1, 1], (2.0 / c_l as f64).sqrt(), rng),
                ),
                b1: store.add(name("branch2.conv1.bias"), Tensor::zeros(&[d / 2])),
                // near-zero closing conv, same idea as zeroing branch3's:
                // the branch grows from the pass-through start instead of
                // scrambling it
                w2: store.add(
                    name("branch2.conv2.weight"),
                    Tensor::randn(&[d, d / 2, 3, 3], CLOSING_CONV_STD, rng),
                ),
                b2: store.add(name("branch2.conv2.bias"), Tensor::zeros(&[d])),
            });
            let b3 = (config.mode == ResMode::ThreeWay && config.branch3 && l + 1 < k)
                .then(|| {
                    let c_next = source_shapes[l + 1].1;
                    Branch3 {
                        // kernel layout C_in x O x K x K; each output
                        // position sees one tap, so fan-in is C_in
                        deconv_w: store.add(
                            name("branch3.deconv.weight"),
                            Tensor::randn(&[c_next, d, 2, 2], (2.0 / c_next as f64).sqrt(), rng),
                        ),
                        conv_w: store.add(
                            name("branch3.conv.weight"),
                            Tensor::randn(&[d, d, 3, 3], (2.0 / (d * 9) as f64).sqrt(), rng),
                        ),
                        conv_b: store.add(name("branch3.conv.bias"), Tensor::zeros(&[d])),
                    }
                });
            levels.push(LevelParams { b1, b2, b3 });
        }
        Ok(ResBlock { config, levels })
    }

    pub fn config(&self) -> &ResBlockConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    /// Zero branch3's final conv (weights and bias) on every level, so
    /// the 3-way block computes exactly its 2-way reduction. The warm
    /// start of the second training stage begins from this state.
    pub fn zero_branch3_output<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for lvl in &self.levels {
            if let Some(b3) = &lvl.b3 {
                for pid in [b3.conv_w, b3.conv_b] {
                    let t = &mut store.get_mut(pid).value;
                    *t = Tensor::zeros(t.shape());
                }
            }
        }
    }

    /// Enrich every level: levels below the top get branch1 + branch2 on
    /// their own map plus (in 3-way mode) branch3 on the next-coarser
    /// *backbone* map; the top level gets only branch1 + branch2.
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        store: &ParamStore<S>,
        pyramid: &FeaturePyramid<'t, S>,
    ) -> Result<ResidualPyramid<'t, S>> {
        if pyramid.levels.len() != self.levels.len() {
            return Err(Error::contract(format!(
                "resblock built for {} levels, pyramid has {}",
                self.levels.len(),
                pyramid.levels.len()
            )));
        }
        let mut out = Vec::new();
        for (l, lvl) in self.levels.iter().enumerate() {
            let x = pyramid.levels[l];
            let mut parts: Vec<Var<'t, S>> = Vec::new();
            if let Some(b1) = &lvl.b1 {
                let w = tape.param(store, b1.w);
                let b = tape.param(store, b1.b);
                parts.push(x.conv2d(w, Some(b), 1, 0)?.relu());
            }
            if let Some(b2) = &lvl.b2 {
                let w1 = tape.param(store, b2.w1);
                let bb1 = tape.param(store, b2.b1);
                let w2 = tape.param(store, b2.w2);
                let bb2 = tape.param(store, b2.b2);
                let mid = x.conv2d(w1, Some(bb1), 1, 0)?.relu();
                parts.push(mid.conv2d(w2, Some(bb2), 1, 1)?.relu());
            }
            if let Some(b3) = &lvl.b3 {
                let dw = tape.param(store, b3.deconv_w);
                let cw = tape.param(store, b3.conv_w);
                let cb = tape.param(store, b3.conv_b);
                let up = pyramid.raw[l + 1].deconv2d(dw, 2, 0)?.relu();
                // final conv stays linear: the branch can contribute
                // signed corrections to the sum
                parts.push(up.conv2d(cw, Some(cb), 1, 1)?);
            }
            let mut sum = parts[0];
            for p in &parts[1..] {
                sum = sum.add(*p)?;
            }
            if self.config.post_sum_relu {
                sum = sum.relu();
            }
            out.push(sum);
        }
        Ok(ResidualPyramid { levels: out, mode: self.config.mode })
    }
}

/// Per-source gradient-path audit result.
#[derive(Debug, Clone)]
pub struct SourcePaths {
    /// Pyramid level, 1-based.
    pub level: usize,
    /// Directed paths from the loss node to the source tensor.
    pub total_paths: u128,
    /// Paths that avoid every enrichment-branch conv/deconv.
    pub direct_paths: u128,
}

#[derive(Debug, Clone)]
pub struct DecouplingReport {
    pub per_source: Vec<SourcePaths>,
}

impl DecouplingReport {
    /// True when every source is reached only through branch nodes.
    pub fn decoupled(&self) -> bool {
        !self.per_source.is_empty()
            && self
                .per_source
                .iter()
                .all(|s| s.direct_paths == 0 && s.total_paths > 0)
    }
}

impl fmt::Display for DecouplingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.per_source {
            writeln!(
                f,
                "source level {}: {} gradient paths, {} bypassing the enrichment branches",
                s.level, s.total_paths, s.direct_paths
            )?;
        }
        writeln!(
            f,
            "backbone decoupled from prediction: {}",
            if self.decoupled() { "yes" } else { "no" }
        )
    }
}

/// Structural audit of the recorded graph: counts directed paths from
/// the (already computed) loss node down to each backbone source tensor,
/// and how many of them avoid every conv/deconv whose kernel belongs to
/// an enrichment branch. A fully enriched graph has zero such direct
/// paths; a baseline graph (heads on raw sources) does not.
pub fn decoupling_check<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    loss: usize,
    sources: &[usize],
) -> DecouplingReport {
    let is_branch_node = |id: usize| -> bool {
        match tape.op_kind(id) {
            OpKind::Conv2d | OpKind::Deconv2d => {
                let parents = tape.parents(id);
                tape.param_of(parents[1])
                    .map(|pid| store.get(pid).name.starts_with("resblock."))
                    .unwrap_or(false)
            }
            _ => false,
        }
    };
    // descending-id sweep: every edge goes from a node to a smaller id,
    // so path counts from the loss accumulate in one pass
    let mut total = vec![0u128; loss + 1];
    let mut direct = vec![0u128; loss + 1];
    total[loss] = 1;
    direct[loss] = if is_branch_node(loss) { 0 } else { 1 };
    for id in (0..=loss).rev() {
        if total[id] == 0 {
            continue;
        }
        let through_direct = if is_branch_node(id) { 0 } else { direct[id] };
        for p in tape.parents(id) {
            total[p] = total[p].saturating_add(total[id]);
            direct[p] = direct[p].saturating_add(through_direct);
        }
    }
    DecouplingReport {
        per_source: sources
            .iter()
            .enumerate()
            .map(|(i, &s)| SourcePaths {
                level: i + 1,
                total_paths: total[s],
                direct_paths: if is_branch_node(s) { 0 } else { direct[s] },
            })
            .collect(),
    }
}
