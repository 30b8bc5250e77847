//! Convolutional feature extractor producing the multi-scale source
//! feature maps the detector predicts from.
//!
//! Each stage is conv3x3(pad 1) -> ReLU -> maxpool2x2(stride 2), so a
//! stage halves the spatial size and the stage schedule fixes every
//! source map's resolution. Only stages up to the deepest requested
//! source are built and run; deeper width entries are inert.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Square input image side.
    pub input_size: usize,
    /// Output channels of each stage, stage 1 first.
    pub stage_widths: Vec<usize>,
    /// 1-based stages whose outputs form the pyramid, shallowest first.
    pub source_stages: Vec<usize>,
    /// Channel-L2-normalize the first source on the prediction side.
    pub l2norm_first_source: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: 64,
            stage_widths: vec![16, 32, 64, 64, 64, 64],
            source_stages: vec![2, 3, 4, 5],
            l2norm_first_source: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source_stages.len() < 2 {
            return Err(Error::config(
                "need at least 2 source stages (the enrichment blocks pair consecutive levels)"
                    .to_string(),
            ));
        }
        if !self.source_stages.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("source stages must be strictly increasing".to_string()));
        }
        let deepest = *self.source_stages.last().unwrap();
        if self.source_stages[0] == 0 || deepest > self.stage_widths.len() {
            return Err(Error::config(format!(
                "source stages must lie in 1..={}, got {:?}",
                self.stage_widths.len(),
                self.source_stages
            )));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("stage widths must be positive".to_string()));
        }
        if self.input_size == 0 || self.input_size % (1 << deepest) != 0 {
            return Err(Error::config(format!(
                "input size {} must be divisible by 2^{} for the pool schedule",
                self.input_size, deepest
            )));
        }
        Ok(())
    }

    /// (spatial side, channels) of each source map, shallowest first.
    pub fn source_shapes(&self) -> Vec<(usize, usize)> {
        self.source_stages
            .iter()
            .map(|&s| (self.input_size >> s, self.stage_widths[s - 1]))
            .collect()
    }
}

/// The ordered source feature maps of one forward pass.
///
/// `levels` is what prediction consumes (first source L2-normalized when
/// the flag is on); `raw` holds the plain stage outputs, which is what
/// the next stage and the stage-composition property operate on. The two
/// views differ at most in the first entry.
pub struct FeaturePyramid<'t, S: Scalar> {
    pub levels: Vec<Var<'t, S>>,
    pub raw: Vec<Var<'t, S>>,
}

/// Parameter handles for the backbone stack.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    /// (conv weight, conv bias) per executed stage.
    stages: Vec<(ParamId, ParamId)>,
    l2norm_gamma: Option<ParamId>,
}

/// Scale applied to the first source's channel norms at initialization.
pub const L2NORM_GAMMA_INIT: f64 = 20.0;

impl Backbone {
    /// Register all backbone parameters. Kernels use fan-in-scaled
    /// normal initialization, biases start at zero, the L2-norm scale
    /// starts at a constant.
    pub fn new<S: Scalar>(
        config: BackboneConfig,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let deepest = *config.source_stages.last().unwrap();
        let mut stages = Vec::new();
        let mut in_c = 3usize;
        for stage in 1..=deepest {
            let out_c = config.stage_widths[stage - 1];
            let std = (2.0 / (in_c * 9) as f64).sqrt();
            let w = store.add(
                format!("backbone.stage{}.conv.weight", stage),
                Tensor::randn(&[out_c, in_c, 3, 3], std, rng),
            );
            let b = store.add(
                format!("backbone.stage{}.conv.bias", stage),
                Tensor::zeros(&[out_c]),
            );
            stages.push((w, b));
            in_c = out_c;
        }
        let l2norm_gamma = if config.l2norm_first_source {
            let c = config.stage_widths[config.source_stages[0] - 1];
            Some(store.add(
                "backbone.l2norm.gamma",
                Tensor::filled(&[c], S::fromf(L2NORM_GAMMA_INIT)),
            ))
        } else {
            None
        };
        Ok(Backbone { config, stages, l2norm_gamma })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Run stages `from+1 ..= to` on a tensor shaped like the raw output
    /// of stage `from` (stage 0 meaning the input image).
    pub fn forward_stages<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        store: &ParamStore<S>,
        input: Var<'t, S>,
        from: usize,
        to: usize,
    ) -> Result<Var<'t, S>> {
        debug_assert!(from < to && to <= self.stages.len());
        let mut x = input;
        for stage in from + 1..=to {
            let (w, b) = self.stages[stage - 1];
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            x = x.conv2d(wv, Some(bv), 1, 1)?.relu().maxpool2d(2, 2)?;
        }
        Ok(x)
    }

    /// Full forward pass from the image to the source pyramid.
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        store: &ParamStore<S>,
        image: Var<'t, S>,
    ) -> Result<FeaturePyramid<'t, S>> {
        let (_, c, h, w) = image.value().dims4()?;
        if c != 3 || h != self.config.input_size || w != self.config.input_size {
            return Err(Error::dim(format!(
                "backbone expects Bx3x{0}x{0} input, got {1}x{2}x{3} per item",
                self.config.input_size, c, h, w
            )));
        }
        let mut raw = Vec::new();
        let mut x = image;
        let mut prev_stage = 0usize;
        for &stage in &self.config.source_stages {
            x = self.forward_stages(tape, store, x, prev_stage, stage)?;
            raw.push(x);
            prev_stage = stage;
        }
        let mut levels = raw.clone();
        if let Some(gamma) = self.l2norm_gamma {
            let gv = tape.param(store, gamma);
            levels[0] = raw[0].l2norm_channels(gv)?;
        }
        Ok(FeaturePyramid { levels, raw })
    }
}
