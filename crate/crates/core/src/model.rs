//! Full detector assembly: backbone, optional enrichment block,
//! prediction heads, and the matching anchor grid.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::boxes::{generate_default_boxes, DefaultBoxSet};
use crate::error::Result;
use crate::heads::{AnchorLayout, HeadMode, Heads};
use crate::params::ParamStore;
use crate::resblock::{ResBlock, ResBlockConfig, ResMode};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_NUM_CLASSES: usize = 3;
pub const ANCHORS_PER_LOCATION: usize = 6;
pub const SCALE_MIN: f64 = 0.2;
pub const SCALE_MAX: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub res_mode: ResMode,
    pub depth: usize,
    pub post_sum_relu: bool,
    pub head_mode: HeadMode,
    pub num_classes: usize,
    pub s_min: f64,
    pub s_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            res_mode: ResMode::ThreeWay,
            depth: crate::resblock::DESK_DEPTH,
            post_sum_relu: false,
            head_mode: HeadMode::Unified,
            num_classes: DEFAULT_NUM_CLASSES,
            s_min: SCALE_MIN,
            s_max: SCALE_MAX,
        }
    }
}

/// One recorded forward pass: raw per-level head outputs plus the node
/// ids of the backbone features feeding them (for graph audits).
pub struct Forwarded<'t, S: Scalar> {
    pub preds: Vec<Var<'t, S>>,
    /// Backbone feature nodes on the prediction side, one per level.
    pub source_ids: Vec<usize>,
}

pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub resblock: Option<ResBlock>,
    pub heads: Heads,
    pub defaults: DefaultBoxSet,
    pub layout: AnchorLayout,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let backbone = Backbone::new(config.backbone.clone(), store, rng)?;
        let shapes = backbone.config().source_shapes();
        let level_dims: Vec<(usize, usize)> = shapes.iter().map(|&(s, _)| (s, s)).collect();

        let (resblock, head_depths): (Option<ResBlock>, Vec<usize>) = match config.res_mode {
            ResMode::None => (None, shapes.iter().map(|&(_, c)| c).collect()),
            mode => {
                let rc = ResBlockConfig {
                    mode,
                    depth: config.depth,
                    post_sum_relu: config.post_sum_relu,
                    ..ResBlockConfig::default()
                };
                let rb = ResBlock::new(rc, &shapes, store, rng)?;
                (Some(rb), vec![config.depth; shapes.len()])
            }
        };

        let heads = Heads::new(
            config.head_mode,
            &head_depths,
            ANCHORS_PER_LOCATION,
            config.num_classes,
            store,
            rng,
        )?;
        let defaults = generate_default_boxes(&level_dims, config.s_min, config.s_max, ANCHORS_PER_LOCATION)?;
        let layout = AnchorLayout::new(&level_dims, ANCHORS_PER_LOCATION, config.num_classes);

        Ok(Model {
            config,
            backbone,
            resblock,
            heads,
            defaults,
            layout,
            _marker: std::marker::PhantomData,
        })
    }

    /// Record a forward pass over a `B x 3 x H x W` image batch.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<S>,
        store: &ParamStore<S>,
        image: Tensor<S>,
    ) -> Result<Forwarded<'t, S>> {
        let image = tape.input(image);
        let pyramid = self.backbone.forward(tape, store, image)?;
        let source_ids: Vec<usize> = pyramid.levels.iter().map(|v| v.id).collect();
        let preds = match &self.resblock {
            Some(rb) => {
                let enriched = rb.forward(tape, store, &pyramid)?;
                self.heads.forward(tape, store, &enriched.levels)?
            }
            None => self.heads.forward(tape, store, &pyramid.levels)?,
        };
        Ok(Forwarded { preds, source_ids })
    }

    pub fn num_levels(&self) -> usize {
        self.backbone.config().source_stages.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(mode: ResMode, head: HeadMode) -> Result<(Model<f64>, ParamStore<f64>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ModelConfig { res_mode: mode, head_mode: head, ..ModelConfig::default() };
        let m = Model::new(cfg, &mut store, &mut rng)?;
        Ok((m, store))
    }

    #[test]
    fn default_assembly_matches_the_grid() {
        let (m, store) = build(ResMode::ThreeWay, HeadMode::Unified).unwrap();
        assert_eq!(m.defaults.len(), 2040);
        assert_eq!(m.layout.total(), 2040);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::randn(&[1, 3, 64, 64], 1.0, &mut rng);
        let fwd = m.forward(&tape, &store, img).unwrap();
        assert_eq!(fwd.preds.len(), 4);
        assert_eq!(fwd.preds[0].shape(), vec![1, 48, 16, 16]);
        assert_eq!(fwd.preds[3].shape(), vec![1, 48, 2, 2]);
        assert_eq!(fwd.source_ids.len(), 4);
    }

    #[test]
    fn baseline_heads_read_backbone_depths() {
        // mixed source channels force per-level head parameters
        assert!(build(ResMode::None, HeadMode::Unified).is_err());
        let (m, store) = build(ResMode::None, HeadMode::Separate).unwrap();
        assert!(m.resblock.is_none());
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::randn(&[1, 3, 64, 64], 1.0, &mut rng);
        let fwd = m.forward(&tape, &store, img).unwrap();
        assert_eq!(fwd.preds.len(), 4);
        assert_eq!(fwd.preds[0].shape(), vec![1, 48, 16, 16]);
    }

    #[test]
    fn forward_is_deterministic() {
        let (m, store) = build(ResMode::TwoWay, HeadMode::Unified).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::randn(&[1, 3, 64, 64], 1.0, &mut rng);
        let run = || {
            let tape = Tape::new();
            let fwd = m.forward(&tape, &store, img.clone()).unwrap();
            fwd.preds.iter().map(|p| p.value_clone()).collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }
}
