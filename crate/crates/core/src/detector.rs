//! Inference path: forward pass, offset decoding, confidence floor,
//! per-class NMS, and final clipping into the unit square.

use crate::boxes::{decode, nms_per_class, Detection, VARIANCES};
use crate::error::Result;
use crate::model::Model;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct DetectOpts {
    /// Candidates at or below this class score are dropped before NMS.
    pub score_floor: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for DetectOpts {
    fn default() -> Self {
        DetectOpts { score_floor: 0.01, nms_iou: 0.45, top_k: 200 }
    }
}

/// Run the detector on a `B x 3 x H x W` batch; one detection list per
/// image, boxes clipped to the unit square.
pub fn detect_batch<S: Scalar>(
    model: &Model<S>,
    store: &ParamStore<S>,
    images: Tensor<S>,
    opts: &DetectOpts,
) -> Result<Vec<Vec<Detection>>> {
    let (b, _, _, _) = images.dims4()?;
    let tape = Tape::new();
    let fwd = model.forward(&tape, store, images)?;
    let values: Vec<Tensor<S>> = fwd.preds.iter().map(|p| p.value_clone()).collect();

    let layout = &model.layout;
    let c1 = layout.num_classes() + 1;
    let mut out = Vec::with_capacity(b);
    for item in 0..b {
        let mut candidates = Vec::new();
        for row in 0..layout.total() {
            let level = layout.level_of(row);
            let data = values[level].data();
            let conf = layout.conf_flat(row, item);
            let mut z: Vec<f64> = conf.iter().map(|&i| data[i as usize].tof()).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in &mut z {
                *v = (*v - m).exp();
            }
            let norm: f64 = z.iter().sum();
            let best = z[1..].iter().cloned().fold(0.0, f64::max) / norm;
            if best <= opts.score_floor {
                continue;
            }
            let loc = layout.loc_flat(row, item);
            let t = [0, 1, 2, 3].map(|q| data[loc[q] as usize].tof());
            let decoded = decode(&t, model.defaults.center(row), VARIANCES)
                .to_corner()
                .clip_unit();
            if !decoded.is_valid() {
                continue;
            }
            for c in 1..c1 {
                let score = z[c] / norm;
                if score > opts.score_floor {
                    candidates.push(Detection { class: c - 1, score, bbox: decoded });
                }
            }
        }
        out.push(nms_per_class(
            &candidates,
            layout.num_classes(),
            opts.nms_iou,
            opts.top_k,
        ));
    }
    Ok(out)
}

/// Single-image convenience wrapper.
pub fn detect<S: Scalar>(
    model: &Model<S>,
    store: &ParamStore<S>,
    image: Tensor<S>,
    opts: &DetectOpts,
) -> Result<Vec<Detection>> {
    Ok(detect_batch(model, store, image, opts)?.pop().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadMode;
    use crate::model::ModelConfig;
    use crate::resblock::ResMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> (Model<f64>, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = ModelConfig {
            res_mode: ResMode::TwoWay,
            head_mode: HeadMode::Unified,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, &mut store, &mut rng).unwrap();
        (m, store)
    }

    #[test]
    fn fresh_model_output_is_bounded_and_clipped() {
        let (m, store) = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::randn(&[1, 3, 64, 64], 0.5, &mut rng);
        let dets = detect(&m, &store, img, &DetectOpts::default()).unwrap();
        assert!(dets.len() <= 200 * 3);
        for d in &dets {
            assert!(d.bbox.x1 >= 0.0 && d.bbox.x2 <= 1.0);
            assert!(d.bbox.y1 >= 0.0 && d.bbox.y2 <= 1.0);
            assert!(d.bbox.is_valid());
            assert!(d.score > 0.01 && d.score <= 1.0);
            assert!(d.class < 3);
        }
    }

    #[test]
    fn batch_items_are_independent_and_reproducible() {
        let (m, store) = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::randn(&[1, 3, 64, 64], 0.5, &mut rng);
        let b = Tensor::<f64>::randn(&[1, 3, 64, 64], 0.5, &mut rng);
        let mut stacked = Vec::new();
        stacked.extend_from_slice(a.data());
        stacked.extend_from_slice(b.data());
        let batch = Tensor::from_vec(&[2, 3, 64, 64], stacked).unwrap();

        let joint = detect_batch(&m, &store, batch, &DetectOpts::default()).unwrap();
        let solo_a = detect(&m, &store, a, &DetectOpts::default()).unwrap();
        let solo_b = detect(&m, &store, b, &DetectOpts::default()).unwrap();
        assert_eq!(joint[0], solo_a);
        assert_eq!(joint[1], solo_b);
        assert_ne!(solo_a, solo_b);
    }

    #[test]
    fn raising_the_floor_only_removes_detections() {
        let (m, store) = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::<f64>::randn(&[1, 3, 64, 64], 0.5, &mut rng);
        let low = detect(&m, &store, img.clone(), &DetectOpts::default()).unwrap();
        let high = detect(
            &m,
            &store,
            img,
            &DetectOpts { score_floor: 0.5, ..DetectOpts::default() },
        )
        .unwrap();
        assert!(high.len() <= low.len());
        for d in &high {
            assert!(d.score > 0.5);
        }
    }
}
