//! Training orchestration: milestone schedules, the two-stage warm-start
//! protocol (2-way first, then branch3 + heads fine-tuned on top), and
//! checkpoint serialization.

use std::fs;
use std::io::Write as IoWrite;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::boxes::match_boxes;
use crate::error::{Error, Result};
use crate::loss::multibox_loss;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::resblock::ResMode;
use crate::scalar::Scalar;
use crate::shapesdata::{augment, Dataset, ShapesSample};
use crate::tape::Tape;

pub const MATCH_IOU: f64 = 0.5;
pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RUNCKPT1";
/// Reserved blob carrying the training rng (seed words + stream
/// position); never a model parameter.
const RNG_BLOB: &str = "rng.state";

/// Step-decay learning-rate schedule: the rate drops by 10x at each
/// milestone, measured in 1-based iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<u64>,
    pub total_iters: u64,
    pub batch_size: usize,
}

impl Schedule {
    /// Stage-1 desk defaults: the full-scale protocol scaled down 20x
    /// with milestone positions preserved proportionally.
    pub fn stage1_desk() -> Self {
        Schedule { base_lr: 1e-3, milestones: vec![4000, 5000], total_iters: 6000, batch_size: 32 }
    }

    /// Stage-2 desk defaults: drops at 4/7 and 6/7 of the run, matching
    /// the fine-tune split 40k/20k/10k.
    pub fn stage2_desk() -> Self {
        let total = 2000u64;
        Schedule {
            base_lr: 1e-3,
            milestones: vec![total * 4 / 7, total * 6 / 7],
            total_iters: total,
            batch_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.total_iters == 0 || self.batch_size == 0 {
            return Err(Error::config("schedule needs positive lr, iterations, batch".to_string()));
        }
        for w in self.milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::config(format!(
                    "milestones must increase strictly, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.total_iters {
                return Err(Error::config(format!(
                    "milestone {} is not below total iterations {}",
                    last, self.total_iters
                )));
            }
        }
        Ok(())
    }

    /// Effective rate at a 1-based iteration: one 10x drop per milestone
    /// already passed. Division by an exact power of ten keeps the
    /// stepped rates on their decimal values.
    pub fn lr_at(&self, iter: u64) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m < iter).count();
        self.base_lr / 10f64.powi(drops as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    TwoWay,
    ThreeWay,
}

impl StageTag {
    fn byte(self) -> u8 {
        match self {
            StageTag::TwoWay => b'2',
            StageTag::ThreeWay => b'3',
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            b'2' => Ok(StageTag::TwoWay),
            b'3' => Ok(StageTag::ThreeWay),
            other => Err(Error::checkpoint(format!("unknown stage tag byte 0x{:02x}", other))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory checkpoint: every parameter as a named f64 blob, plus the
/// stage tag, iteration counter, and training rng state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: StageTag,
    pub iteration: u64,
    pub blobs: Vec<Blob>,
}

fn rng_blob(rng: &ChaCha8Rng) -> Blob {
    let seed = rng.get_seed();
    let pos = rng.get_word_pos();
    let mut words = Vec::with_capacity(6);
    for c in seed.chunks(8) {
        words.push(f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())));
    }
    words.push(f64::from_bits(pos as u64));
    words.push(f64::from_bits((pos >> 64) as u64));
    Blob { name: RNG_BLOB.to_string(), shape: vec![6], data: words }
}

impl Checkpoint {
    pub fn from_store<S: Scalar>(
        store: &ParamStore<S>,
        stage: StageTag,
        iteration: u64,
        rng: &ChaCha8Rng,
    ) -> Self {
        let mut blobs: Vec<Blob> = store
            .iter()
            .map(|(_, p)| Blob {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.tof()).collect(),
            })
            .collect();
        blobs.push(rng_blob(rng));
        Checkpoint { version: CHECKPOINT_VERSION, stage, iteration, blobs }
    }

    /// Restore the recorded training rng, if the checkpoint carries one.
    pub fn rng(&self) -> Option<ChaCha8Rng> {
        let blob = self.blobs.iter().find(|b| b.name == RNG_BLOB)?;
        if blob.data.len() != 6 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, w) in blob.data[..4].iter().enumerate() {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_bits().to_le_bytes());
        }
        let pos = (blob.data[4].to_bits() as u128) | ((blob.data[5].to_bits() as u128) << 64);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Some(rng)
    }

    /// Copy blob values into matching parameters by name. With
    /// `allow_missing_for`, parameters matching the predicate may be
    /// absent from the checkpoint (fresh-branch warm starts); every
    /// other parameter must be covered, and every non-reserved blob
    /// must land somewhere.
    pub fn apply_to_store<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        allow_missing_for: Option<&dyn Fn(&str) -> bool>,
    ) -> Result<()> {
        // validate fully before mutating anything
        let mut plan = Vec::new();
        for blob in &self.blobs {
            if blob.name == RNG_BLOB {
                continue;
            }
            let id = store.find(&blob.name).ok_or_else(|| {
                Error::checkpoint(format!("blob '{}' has no matching parameter", blob.name))
            })?;
            let have = store.get(id).value.shape().to_vec();
            if have != blob.shape {
                return Err(Error::checkpoint(format!(
                    "blob '{}' has shape {:?}, parameter expects {:?}",
                    blob.name, blob.shape, have
                )));
            }
            plan.push((id, blob));
        }
        let covered: std::collections::HashSet<&str> =
            plan.iter().map(|(_, b)| b.name.as_str()).collect();
        for (_, p) in store.iter() {
            if !covered.contains(p.name.as_str()) {
                let excused = allow_missing_for.map_or(false, |f| f(&p.name));
                if !excused {
                    return Err(Error::checkpoint(format!(
                        "parameter '{}' missing from checkpoint",
                        p.name
                    )));
                }
            }
        }
        for (id, blob) in plan {
            let param = store.get_mut(id);
            for (dst, src) in param.value.data_mut().iter_mut().zip(&blob.data) {
                *dst = S::fromf(*src);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        buf.push(self.stage.byte());
        buf.extend_from_slice(&self.iteration.to_le_bytes());
        buf.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            let name = b.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &e in &b.shape {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in &b.data {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            if *at + n > bytes.len() {
                return Err(Error::checkpoint(format!(
                    "truncated: needed {} more bytes at offset {} of {}",
                    n,
                    *at,
                    bytes.len()
                )));
            }
            let s = &bytes[*at..*at + n];
            *at += n;
            Ok(s)
        };
        let magic = take(&mut at, 8)?;
        if magic != MAGIC {
            return Err(Error::checkpoint("bad magic bytes".to_string()));
        }
        let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::checkpoint(format!(
                "format version {} unsupported (expected {})",
                version, CHECKPOINT_VERSION
            )));
        }
        let stage = StageTag::from_byte(take(&mut at, 1)?[0])?;
        let iteration = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        let mut blobs = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
                .map_err(|_| Error::checkpoint("blob name is not UTF-8".to_string()))?;
            let rank = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_bits(u64::from_le_bytes(
                    take(&mut at, 8)?.try_into().unwrap(),
                )));
            }
            blobs.push(Blob { name, shape, data });
        }
        if at != bytes.len() {
            return Err(Error::checkpoint(format!(
                "{} trailing bytes after blob {}",
                bytes.len() - at,
                count
            )));
        }
        Ok(Checkpoint { version, stage, iteration, blobs })
    }
}

/// Knobs shared by every training entry point.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    /// IoU threshold above which a default box counts as a positive.
    pub match_iou: f64,
}

impl TrainSettings {
    pub fn new(model: ModelConfig, schedule: Schedule, seed: u64) -> Self {
        TrainSettings {
            model,
            schedule,
            seed,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: true,
            match_iou: MATCH_IOU,
        }
    }
}

/// Batch-mean loss terms of one iteration, for loss-curve logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTrace {
    pub lr: f64,
    pub loc: f64,
    pub conf: f64,
    pub total: f64,
}

pub struct TrainResult<S: Scalar> {
    pub checkpoint: Checkpoint,
    pub model: Model<S>,
    pub store: ParamStore<S>,
    /// One entry per iteration.
    pub losses: Vec<LossTrace>,
}

fn item_pass<S: Scalar>(
    model: &Model<S>,
    store: &ParamStore<S>,
    sample: &ShapesSample,
    match_iou: f64,
    inv_batch: f64,
) -> Result<(crate::params::GradMap<S>, f64, f64, f64)> {
    let tape = Tape::new();
    let fwd = model.forward(&tape, store, sample.to_tensor())?;
    let gt_boxes: Vec<_> = sample.boxes.iter().map(|g| g.bbox).collect();
    let matches = match_boxes(model.defaults.corners(), &gt_boxes, match_iou)?;
    let loss = multibox_loss(
        &tape,
        &model.layout,
        &fwd.preds,
        &model.defaults,
        &matches,
        &sample.boxes,
        0,
    )?;
    let value = loss.total.value().item().tof();
    if !value.is_finite() {
        return Err(Error::numerical(format!("loss diverged to {}", value)));
    }
    let norm = loss.num_positives.max(1) as f64;
    let grads = tape.backward_seeded(loss.total, S::fromf(inv_batch), store.len())?;
    Ok((grads, loss.loc / norm, loss.conf / norm, value))
}

/// Run the optimization loop; batch items evaluate on their own tapes in
/// parallel, gradients merge in batch order so trajectories stay
/// bit-reproducible.
fn run_loop<S: Scalar>(
    model: &Model<S>,
    store: &mut ParamStore<S>,
    dataset: &Dataset,
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LossTrace>> {
    let sched = &settings.schedule;
    sched.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty".to_string()));
    }
    let mut losses = Vec::with_capacity(sched.total_iters as usize);
    let inv_batch = 1.0 / sched.batch_size as f64;
    for iter in 1..=sched.total_iters {
        let mut batch = Vec::with_capacity(sched.batch_size);
        for _ in 0..sched.batch_size {
            let idx = rng.random_range(0..dataset.len());
            let sample = dataset.sample(idx)?;
            batch.push(if settings.augment { augment(&sample, rng) } else { sample });
        }
        let results: Vec<Result<_>> = batch
            .par_iter()
            .map(|s| item_pass(model, store, s, settings.match_iou, inv_batch))
            .collect();
        let mut trace =
            LossTrace { lr: sched.lr_at(iter), loc: 0.0, conf: 0.0, total: 0.0 };
        for r in results {
            let (grads, loc, conf, value) = r?;
            store.accumulate(&grads)?;
            trace.loc += loc * inv_batch;
            trace.conf += conf * inv_batch;
            trace.total += value * inv_batch;
        }
        if !trace.total.is_finite() {
            return Err(Error::numerical(format!(
                "batch loss diverged to {} at iteration {}",
                trace.total, iter
            )));
        }
        store.sgd_step(
            S::fromf(trace.lr),
            S::fromf(settings.momentum),
            S::fromf(settings.weight_decay),
        );
        store.zero_grad();
        losses.push(trace);
    }
    Ok(losses)
}

/// Stage 1: end-to-end training of the backbone, 2-way enrichment (or
/// no enrichment for the plain baseline), and heads.
pub fn train_stage1<S: Scalar>(
    settings: &TrainSettings,
    dataset: &Dataset,
) -> Result<TrainResult<S>> {
    if settings.model.res_mode == ResMode::ThreeWay {
        return Err(Error::config(
            "stage 1 trains 2way or baseline; 3way needs a stage-1 checkpoint or the end-to-end path"
                .to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut store = ParamStore::new();
    let model = Model::new(settings.model.clone(), &mut store, &mut rng)?;
    let losses = run_loop(&model, &mut store, dataset, settings, &mut rng)?;
    let checkpoint =
        Checkpoint::from_store(&store, StageTag::TwoWay, settings.schedule.total_iters, &rng);
    Ok(TrainResult { checkpoint, model, store, losses })
}

/// Name filter for what stage 2 trains: the new third branch and the
/// prediction heads.
pub fn stage2_trainable(name: &str) -> bool {
    name.contains(".branch3.") || name.starts_with("head.")
}

/// Stage 2: start from a 2-way checkpoint, add branch3 with a zeroed
/// output conv (so step 0 computes exactly the stage-1 function), freeze
/// everything except branch3 and the heads, fine-tune.
pub fn train_stage2<S: Scalar>(
    stage1: &Checkpoint,
    settings: &TrainSettings,
    dataset: &Dataset,
) -> Result<TrainResult<S>> {
    if stage1.stage != StageTag::TwoWay {
        return Err(Error::contract("stage 2 resumes from a 2-way checkpoint".to_string()));
    }
    if settings.model.res_mode != ResMode::ThreeWay {
        return Err(Error::config("stage 2 trains the 3-way configuration".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut store = ParamStore::new();
    let model = Model::new(settings.model.clone(), &mut store, &mut rng)?;
    stage1.apply_to_store(&mut store, Some(&|name: &str| name.contains(".branch3.")))?;
    model
        .resblock
        .as_ref()
        .expect("3way model carries an enrichment block")
        .zero_branch3_output(&mut store);
    store.freeze_where(true, |name| !stage2_trainable(name));

    let losses = run_loop(&model, &mut store, dataset, settings, &mut rng)?;
    let checkpoint =
        Checkpoint::from_store(&store, StageTag::ThreeWay, settings.schedule.total_iters, &rng);
    Ok(TrainResult { checkpoint, model, store, losses })
}

/// Alternative single-stage path: 3-way trained end to end from
/// scratch, nothing frozen.
pub fn train_e2e_3way<S: Scalar>(
    settings: &TrainSettings,
    dataset: &Dataset,
) -> Result<TrainResult<S>> {
    if settings.model.res_mode != ResMode::ThreeWay {
        return Err(Error::config("end-to-end path is for the 3-way configuration".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut store = ParamStore::new();
    let model = Model::new(settings.model.clone(), &mut store, &mut rng)?;
    // same branch3 output policy as the warm start
    model.resblock.as_ref().unwrap().zero_branch3_output(&mut store);
    let losses = run_loop(&model, &mut store, dataset, settings, &mut rng)?;
    let checkpoint =
        Checkpoint::from_store(&store, StageTag::ThreeWay, settings.schedule.total_iters, &rng);
    Ok(TrainResult { checkpoint, model, store, losses })
}
