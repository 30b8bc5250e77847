//! Experiment configuration: a flat text file of dotted `key=value`
//! lines. Every key has a default, unknown keys are rejected, and the
//! fully resolved set is echoed into each output directory so a run's
//! artifacts always record what produced them.

use std::collections::HashSet;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::detector::DetectOpts;
use crate::error::{Error, Result};
use crate::heads::HeadMode;
use crate::model::ModelConfig;
use crate::pipeline::{Schedule, TrainSettings};
use crate::resblock::ResMode;

/// File name of the resolved-config echo inside an output directory.
pub const RESOLVED_NAME: &str = "config.resolved";

/// Every tunable of a run. Defaults describe the standard desk-scale
/// three-way model with its stage-1 schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // backbone
    pub input_size: usize,
    pub stage_widths: Vec<usize>,
    pub source_stages: Vec<usize>,
    pub l2norm: bool,
    // resblock
    pub res_mode: ResMode,
    pub depth: usize,
    pub post_sum_relu: bool,
    // head
    pub head_mode: HeadMode,
    // boxes
    pub s_min: f64,
    pub s_max: f64,
    // loss
    pub match_iou: f64,
    // schedule
    pub base_lr: f64,
    pub milestones: Vec<u64>,
    pub total_iters: u64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    // data
    pub data_path: String,
    pub augment: bool,
    pub num_classes: usize,
    // eval
    pub score_floor: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    pub ap_iou: f64,
    pub eval_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sched = Schedule::stage1_desk();
        let model = ModelConfig::default();
        let opts = DetectOpts::default();
        ExperimentConfig {
            input_size: model.backbone.input_size,
            stage_widths: model.backbone.stage_widths.clone(),
            source_stages: model.backbone.source_stages.clone(),
            l2norm: model.backbone.l2norm_first_source,
            res_mode: model.res_mode,
            depth: model.depth,
            post_sum_relu: model.post_sum_relu,
            head_mode: model.head_mode,
            s_min: model.s_min,
            s_max: model.s_max,
            match_iou: crate::pipeline::MATCH_IOU,
            base_lr: sched.base_lr,
            milestones: sched.milestones,
            total_iters: sched.total_iters,
            batch_size: sched.batch_size,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 7,
            data_path: "data/shapes".to_string(),
            augment: true,
            num_classes: model.num_classes,
            score_floor: opts.score_floor,
            nms_iou: opts.nms_iou,
            top_k: opts.top_k,
            ap_iou: 0.5,
            eval_batch: 16,
        }
    }
}

fn parse_one<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| {
        Error::config(format!("key '{}': cannot parse '{}' as {} ({})", key, value, what, e))
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|part| parse_one(key, part.trim(), what)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => {
            Err(Error::config(format!("key '{}': expected true or false, got '{}'", key, other)))
        }
    }
}

fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "backbone.input_size" => self.input_size = parse_one(key, value, "an integer")?,
            "backbone.stage_widths" => {
                self.stage_widths = parse_list(key, value, "an integer list")?
            }
            "backbone.source_stages" => {
                self.source_stages = parse_list(key, value, "an integer list")?
            }
            "backbone.l2norm" => self.l2norm = parse_bool(key, value)?,
            "resblock.mode" => self.res_mode = value.parse()?,
            "resblock.depth" => self.depth = parse_one(key, value, "an integer")?,
            "resblock.post_sum_relu" => self.post_sum_relu = parse_bool(key, value)?,
            "head.mode" => self.head_mode = value.parse()?,
            "boxes.s_min" => self.s_min = parse_one(key, value, "a number")?,
            "boxes.s_max" => self.s_max = parse_one(key, value, "a number")?,
            "loss.match_iou" => self.match_iou = parse_one(key, value, "a number")?,
            "schedule.base_lr" => self.base_lr = parse_one(key, value, "a number")?,
            "schedule.milestones" => self.milestones = parse_list(key, value, "an integer list")?,
            "schedule.total_iters" => self.total_iters = parse_one(key, value, "an integer")?,
            "schedule.batch_size" => self.batch_size = parse_one(key, value, "an integer")?,
            "schedule.momentum" => self.momentum = parse_one(key, value, "a number")?,
            "schedule.weight_decay" => self.weight_decay = parse_one(key, value, "a number")?,
            "schedule.seed" => self.seed = parse_one(key, value, "an integer")?,
            "data.path" => self.data_path = value.to_string(),
            "data.augment" => self.augment = parse_bool(key, value)?,
            "data.num_classes" => self.num_classes = parse_one(key, value, "an integer")?,
            "eval.score_floor" => self.score_floor = parse_one(key, value, "a number")?,
            "eval.nms_iou" => self.nms_iou = parse_one(key, value, "a number")?,
            "eval.top_k" => self.top_k = parse_one(key, value, "an integer")?,
            "eval.ap_iou" => self.ap_iou = parse_one(key, value, "a number")?,
            "eval.batch_size" => self.eval_batch = parse_one(key, value, "an integer")?,
            other => return Err(Error::config(format!("unknown config key '{}'", other))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("backbone.input_size", self.input_size.to_string()),
            ("backbone.stage_widths", join_list(&self.stage_widths)),
            ("backbone.source_stages", join_list(&self.source_stages)),
            ("backbone.l2norm", self.l2norm.to_string()),
            ("resblock.mode", self.res_mode.to_string()),
            ("resblock.depth", self.depth.to_string()),
            ("resblock.post_sum_relu", self.post_sum_relu.to_string()),
            ("head.mode", self.head_mode.to_string()),
            ("boxes.s_min", self.s_min.to_string()),
            ("boxes.s_max", self.s_max.to_string()),
            ("loss.match_iou", self.match_iou.to_string()),
            ("schedule.base_lr", self.base_lr.to_string()),
            ("schedule.milestones", join_list(&self.milestones)),
            ("schedule.total_iters", self.total_iters.to_string()),
            ("schedule.batch_size", self.batch_size.to_string()),
            ("schedule.momentum", self.momentum.to_string()),
            ("schedule.weight_decay", self.weight_decay.to_string()),
            ("schedule.seed", self.seed.to_string()),
            ("data.path", self.data_path.clone()),
            ("data.augment", self.augment.to_string()),
            ("data.num_classes", self.num_classes.to_string()),
            ("eval.score_floor", self.score_floor.to_string()),
            ("eval.nms_iou", self.nms_iou.to_string()),
            ("eval.top_k", self.top_k.to_string()),
            ("eval.ap_iou", self.ap_iou.to_string()),
            ("eval.batch_size", self.eval_batch.to_string()),
        ]
    }

    /// Parse a config file body: one `key=value` per line, `#` comment
    /// lines and blank lines ignored, unknown or repeated keys rejected.
    /// Keys not mentioned keep their defaults.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: HashSet<&str> = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected key=value, got '{}'",
                    idx + 1,
                    line
                )));
            };
            let (key, value) = (k.trim(), v.trim());
            if !seen.insert(key) {
                return Err(Error::config(format!("line {}: key '{}' set twice", idx + 1, key)));
            }
            cfg.apply(key, value)
                .map_err(|e| Error::config(format!("line {}: {}", idx + 1, e)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {}", path.display(), e)))
        })?;
        Self::parse(&text)
    }

    /// Look for the resolved config written next to a run artifact
    /// (checkpoint, detection dump) and rebuild the configuration that
    /// produced it.
    pub fn load_beside(artifact: &Path) -> Result<ExperimentConfig> {
        let dir = artifact.parent().filter(|p| !p.as_os_str().is_empty());
        Self::load(&dir.unwrap_or(Path::new(".")).join(RESOLVED_NAME))
    }

    /// The complete key set with effective values; parsing it back
    /// reproduces this configuration exactly.
    pub fn to_resolved_string(&self) -> String {
        let mut out = String::from("# resolved configuration; every key at its effective value\n");
        let mut section = "";
        for (key, value) in self.entries() {
            let head = key.split('.').next().unwrap();
            if head != section {
                section = head;
                out.push('\n');
            }
            out.push_str(&format!("{}={}\n", key, value));
        }
        out
    }

    /// Write the resolved echo into `dir`, creating it if needed.
    pub fn save_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, self.to_resolved_string())?;
        Ok(path)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: crate::backbone::BackboneConfig {
                input_size: self.input_size,
                stage_widths: self.stage_widths.clone(),
                source_stages: self.source_stages.clone(),
                l2norm_first_source: self.l2norm,
            },
            res_mode: self.res_mode,
            depth: self.depth,
            post_sum_relu: self.post_sum_relu,
            head_mode: self.head_mode,
            num_classes: self.num_classes,
            s_min: self.s_min,
            s_max: self.s_max,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            milestones: self.milestones.clone(),
            total_iters: self.total_iters,
            batch_size: self.batch_size,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            model: self.model_config(),
            schedule: self.schedule(),
            seed: self.seed,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            augment: self.augment,
            match_iou: self.match_iou,
        }
    }

    pub fn detect_opts(&self) -> DetectOpts {
        DetectOpts { score_floor: self.score_floor, nms_iou: self.nms_iou, top_k: self.top_k }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_resolved_string();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);

        // and again after overriding a sample from every value kind
        let custom = ExperimentConfig::parse(
            "resblock.mode=none\n\
             head.mode=separate\n\
             backbone.stage_widths = 8, 16, 16\n\
             backbone.source_stages=2,3\n\
             schedule.milestones=\n\
             schedule.weight_decay=0.0005\n\
             data.path=/tmp/somewhere else\n\
             data.augment=false\n",
        )
        .unwrap();
        assert_eq!(ExperimentConfig::parse(&custom.to_resolved_string()).unwrap(), custom);
        assert_eq!(custom.res_mode, ResMode::None);
        assert_eq!(custom.head_mode, HeadMode::Separate);
        assert_eq!(custom.stage_widths, vec![8, 16, 16]);
        assert!(custom.milestones.is_empty());
        assert_eq!(custom.weight_decay, 5e-4);
        assert_eq!(custom.data_path, "/tmp/somewhere else");
        assert!(!custom.augment);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = ExperimentConfig::parse(
            "# a comment\n\n   # indented comment\nresblock.depth=16\n",
        )
        .unwrap();
        assert_eq!(cfg.depth, 16);
    }

    #[test]
    fn unknown_key_is_rejected_with_location() {
        let err = ExperimentConfig::parse("resblock.depht=32\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown config key 'resblock.depht'"), "{}", msg);
        assert!(msg.contains("line 1"), "{}", msg);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let err = ExperimentConfig::parse("resblock.mode\n").unwrap_err();
        assert!(err.to_string().contains("expected key=value"), "{}", err);

        let err = ExperimentConfig::parse("resblock.depth=thirty\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("resblock.depth") && msg.contains("thirty"), "{}", msg);

        let err = ExperimentConfig::parse("data.augment=yes\n").unwrap_err();
        assert!(err.to_string().contains("expected true or false"), "{}", err);

        let err = ExperimentConfig::parse("resblock.mode=4way\n").unwrap_err();
        assert!(err.to_string().contains("4way"), "{}", err);
    }

    #[test]
    fn repeated_key_is_rejected() {
        let err =
            ExperimentConfig::parse("resblock.depth=16\nresblock.depth=32\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("set twice") && msg.contains("line 2"), "{}", msg);
    }

    #[test]
    fn every_key_appears_in_the_resolved_echo() {
        let cfg = ExperimentConfig::default();
        let keys: Vec<_> = cfg.entries().iter().map(|(k, _)| *k).collect();
        let text = cfg.to_resolved_string();
        for key in &keys {
            assert!(
                text.lines().any(|l| l.starts_with(&format!("{}=", key))),
                "missing {}",
                key
            );
        }
        let value_lines =
            text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).count();
        assert_eq!(value_lines, keys.len());
    }

    #[test]
    fn builders_map_fields_through() {
        let cfg = ExperimentConfig::parse(
            "backbone.input_size=64\n\
             backbone.l2norm=false\n\
             resblock.mode=2way\n\
             resblock.depth=16\n\
             boxes.s_min=0.1\n\
             boxes.s_max=0.8\n\
             loss.match_iou=0.4\n\
             schedule.base_lr=0.01\n\
             schedule.milestones=10,20\n\
             schedule.total_iters=30\n\
             schedule.batch_size=4\n\
             schedule.seed=99\n\
             data.num_classes=5\n\
             eval.score_floor=0.02\n\
             eval.top_k=50\n",
        )
        .unwrap();

        let mc = cfg.model_config();
        assert_eq!(mc.res_mode, ResMode::TwoWay);
        assert_eq!(mc.depth, 16);
        assert_eq!(mc.num_classes, 5);
        assert!(!mc.backbone.l2norm_first_source);
        assert_eq!((mc.s_min, mc.s_max), (0.1, 0.8));

        let sched = cfg.schedule();
        assert_eq!(sched.base_lr, 0.01);
        assert_eq!(sched.milestones, vec![10, 20]);
        assert_eq!(sched.total_iters, 30);
        assert_eq!(sched.batch_size, 4);
        sched.validate().unwrap();

        let ts = cfg.train_settings();
        assert_eq!(ts.seed, 99);
        assert_eq!(ts.match_iou, 0.4);
        assert_eq!(ts.momentum, 0.9);

        let opts = cfg.detect_opts();
        assert_eq!(opts.score_floor, 0.02);
        assert_eq!(opts.top_k, 50);
        assert_eq!(opts.nms_iou, 0.45);
    }

    #[test]
    fn default_schedule_matches_the_stage1_preset() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.schedule(), Schedule::stage1_desk());
    }

    #[test]
    fn saved_echo_loads_from_disk_and_beside_artifacts() {
        let dir = std::env::temp_dir().join("config_echo_rt");
        let _ = fs::remove_dir_all(&dir);
        let cfg =
            ExperimentConfig::parse("resblock.mode=none\nhead.mode=separate\n").unwrap();
        let path = cfg.save_resolved(&dir).unwrap();
        assert_eq!(path.file_name().unwrap(), RESOLVED_NAME);
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
        assert_eq!(ExperimentConfig::load_beside(&dir.join("model.ckpt")).unwrap(), cfg);

        let missing = ExperimentConfig::load_beside(Path::new("/nonexistent/model.ckpt"));
        let msg = missing.unwrap_err().to_string();
        assert!(msg.contains(RESOLVED_NAME), "{}", msg);
    }
}
