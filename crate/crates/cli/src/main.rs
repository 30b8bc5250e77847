//! `rundet`: command-line front end for the detection engine.
//!
//! Exit codes: 0 success, 1 usage or configuration problem, 2 I/O or
//! corrupt-artifact problem, 3 numerical failure.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{ArgGroup, Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rundet_core::boxes::{
    box_in_box_rate_pooled, read_detections, write_detections, DetRecord, Detection,
};
use rundet_core::config::ExperimentConfig;
use rundet_core::detector::{detect, detect_batch};
use rundet_core::evalkit::{benchmark_fps, evaluate, mac_count, GtRecord};
use rundet_core::model::Model;
use rundet_core::params::ParamStore;
use rundet_core::pipeline::{train_e2e_3way, train_stage1, train_stage2, Checkpoint};
use rundet_core::shapesdata::{
    generate_dataset, Dataset, ShapesSample, CANVAS, CLASS_NAMES, IMAGE_BYTES,
    NUM_CLASSES as SHAPE_CLASSES,
};
use rundet_core::tensor::Tensor;
use rundet_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "rundet", version, about = "train, evaluate and run the shapes detector")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic shapes dataset
    GenData(GenDataArgs),
    /// Train one stage and write a checkpoint plus a loss log
    Train(TrainArgs),
    /// Score a checkpoint or a detection dump against a dataset
    Eval(EvalArgs),
    /// Run one image through a model and write dump + overlay
    Detect(DetectArgs),
    /// Report the nested same-class detection rate of a dump
    Diagnose(DiagnoseArgs),
    /// Measure end-to-end inference throughput of a checkpoint
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of samples to generate
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory to create
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config file (key=value lines)
    #[arg(long)]
    config: PathBuf,
    /// Training protocol to run
    #[arg(long, value_enum)]
    stage: Stage,
    /// First-stage checkpoint to warm-start from (stage 3way only)
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for checkpoint, loss log and config echo
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, clap::ValueEnum)]
enum Stage {
    /// Single-stage training of a baseline or 2-way architecture
    #[value(name = "2way")]
    TwoWay,
    /// Warm-start the 3-way branches from a 2-way checkpoint
    #[value(name = "3way")]
    ThreeWay,
    /// Train the 3-way architecture end to end from scratch
    #[value(name = "e2e3way")]
    E2eThreeWay,
}

#[derive(Args)]
#[command(group = ArgGroup::new("source").required(true).args(["checkpoint", "dets"]))]
struct EvalArgs {
    /// Checkpoint to run over the dataset
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pre-computed detection dump to score instead (image ids are
    /// dataset sample ids)
    #[arg(long)]
    dets: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the report
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Checkpoint to run
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image: png (any size) or a raw 64x64 dataset .rgb file
    #[arg(long)]
    image: PathBuf,
    /// Output directory for the dump and the overlay image
    #[arg(long)]
    out: PathBuf,
    /// Only detections at or above this score are drawn on the overlay
    #[arg(long, default_value_t = 0.5)]
    min_score: f64,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Detection dump to analyse
    #[arg(long)]
    dets: PathBuf,
    /// Intersection-over-smaller-area level that counts as containment
    #[arg(long, default_value_t = 0.9)]
    containment: f64,
    /// Ignore detections below this score
    #[arg(long, default_value_t = 0.5)]
    min_score: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint to run
    #[arg(long)]
    checkpoint: PathBuf,
    /// Timed runs (three warmups come first)
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Images per run
    #[arg(long, default_value_t = 16)]
    batch: usize,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 on usage problems by default; this tool
            // reserves 2 for I/O failures
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {:#}", e);
        std::process::exit(exit_code(&e));
    }
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Detect(a) => cmd_detect(a),
        Cmd::Diagnose(a) => cmd_diagnose(a),
        Cmd::Bench(a) => cmd_bench(a),
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<CoreError>() {
        match e {
            CoreError::Io(_) | CoreError::Data(_) | CoreError::Checkpoint(_) => 2,
            CoreError::Numerical(_) => 3,
            _ => 1,
        }
    } else if err.downcast_ref::<std::io::Error>().is_some()
        || err.downcast_ref::<image::ImageError>().is_some()
    {
        2
    } else {
        1
    }
}

/// Every command that produces an output directory drops a note with
/// the tool version and the exact invocation.
fn write_run_info(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let args: Vec<String> = std::env::args().collect();
    let text = format!(
        "tool=rundet {}\ncommand={}\n",
        env!("CARGO_PKG_VERSION"),
        args.join(" ")
    );
    fs::write(dir.join("run_info.txt"), text)?;
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let manifest = generate_dataset(a.n as usize, a.seed, &a.out)?;
    write_run_info(&a.out)?;
    println!("wrote {} samples under {}", manifest.entries.len(), a.out.display());
    println!("manifest: {}", a.out.join("manifest.txt").display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let settings = cfg.train_settings();
    let dataset = Dataset::open(Path::new(&cfg.data_path))
        .with_context(|| format!("opening dataset at {}", cfg.data_path))?;
    cfg.save_resolved(&a.out)?;
    write_run_info(&a.out)?;

    if a.stage != Stage::ThreeWay && a.resume.is_some() {
        return Err(CoreError::config("--resume only applies to stage 3way").into());
    }
    let result = match a.stage {
        Stage::TwoWay => train_stage1::<f64>(&settings, &dataset)?,
        Stage::ThreeWay => {
            let resume = a.resume.as_deref().ok_or_else(|| {
                CoreError::config(
                    "stage 3way warm-starts from a first-stage checkpoint; pass --resume <checkpoint>",
                )
            })?;
            let stage1 = Checkpoint::load(resume)?;
            train_stage2::<f64>(&stage1, &settings, &dataset)?
        }
        Stage::E2eThreeWay => train_e2e_3way::<f64>(&settings, &dataset)?,
    };

    let ckpt_path = a.out.join("model.ckpt");
    result.checkpoint.save(&ckpt_path)?;
    let mut log = String::new();
    for (i, t) in result.losses.iter().enumerate() {
        log.push_str(&format!(
            "{} {} {:.6} {:.6} {:.6}\n",
            i + 1,
            t.lr,
            t.loc,
            t.conf,
            t.total
        ));
    }
    fs::write(a.out.join("loss_log.txt"), log)?;

    let last = result.losses.last().expect("at least one iteration");
    println!(
        "trained {} iterations; final loss {:.6} (loc {:.6}, conf {:.6})",
        result.losses.len(),
        last.total,
        last.loc,
        last.conf
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

/// Rebuild the model a checkpoint was trained with, from the resolved
/// config written next to it, and load its weights.
fn load_model(
    ckpt_path: &Path,
) -> anyhow::Result<(ExperimentConfig, Model<f64>, ParamStore<f64>)> {
    let cfg = ExperimentConfig::load_beside(ckpt_path)
        .with_context(|| format!("reading the resolved config next to {}", ckpt_path.display()))?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(cfg.model_config(), &mut store, &mut rng)?;
    ckpt.apply_to_store(&mut store, None)?;
    Ok((cfg, model, store))
}

fn stack_images(samples: &[ShapesSample]) -> Tensor<f64> {
    let plane = 3 * CANVAS * CANVAS;
    let mut out = Tensor::zeros(&[samples.len(), 3, CANVAS, CANVAS]);
    for (i, s) in samples.iter().enumerate() {
        let one: Tensor<f64> = s.to_tensor();
        out.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(one.data());
    }
    out
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let dataset = Dataset::open(&a.data)?;
    let samples: Vec<ShapesSample> = dataset.iter().collect::<Result<_, _>>()?;
    let gts: Vec<GtRecord> = samples
        .iter()
        .flat_map(|s| {
            s.boxes.iter().map(|b| GtRecord { image_id: s.id.to_string(), gt: *b })
        })
        .collect();

    let (cfg, dets) = if let Some(ckpt_path) = &a.checkpoint {
        let (cfg, model, store) = load_model(ckpt_path)?;
        let opts = cfg.detect_opts();
        let mut dets = Vec::new();
        for chunk in samples.chunks(cfg.eval_batch.max(1)) {
            let per_image = detect_batch(&model, &store, stack_images(chunk), &opts)?;
            for (s, found) in chunk.iter().zip(per_image) {
                dets.extend(found.into_iter().map(|det| DetRecord {
                    image_id: s.id.to_string(),
                    det,
                }));
            }
        }
        (cfg, dets)
    } else {
        let dump = a.dets.as_ref().expect("clap guarantees one source");
        let cfg = match ExperimentConfig::load_beside(dump) {
            Ok(cfg) => cfg,
            Err(_) => {
                eprintln!(
                    "note: no resolved config next to {}; scoring with default evaluation keys",
                    dump.display()
                );
                ExperimentConfig::default()
            }
        };
        let file = fs::File::open(dump)
            .with_context(|| format!("opening detection dump {}", dump.display()))?;
        (cfg, read_detections(BufReader::new(file))?)
    };

    let report = evaluate(&dets, &gts, cfg.num_classes, cfg.ap_iou);
    cfg.save_resolved(&a.out)?;
    write_run_info(&a.out)?;
    fs::write(a.out.join("eval_report.txt"), report.key_values())?;
    let mut dump = BufWriter::new(fs::File::create(a.out.join("detections.txt"))?);
    write_detections(&mut dump, &dets)?;
    dump.flush()?;
    print!("{}", report);
    println!("report: {}", a.out.join("eval_report.txt").display());
    Ok(())
}

fn class_name(num_classes: usize, class: usize) -> String {
    if num_classes == SHAPE_CLASSES && class < CLASS_NAMES.len() {
        CLASS_NAMES[class].to_string()
    } else {
        format!("class{}", class)
    }
}

/// Decode a png (any size) or a raw planar dataset image into the
/// model-resolution tensor plus a full-resolution copy for overlays.
fn read_image(path: &Path, side: usize) -> anyhow::Result<(Tensor<f64>, image::RgbImage, String)> {
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    let img: image::RgbImage = if path.extension().is_some_and(|e| e == "rgb") {
        let bytes = fs::read(path)?;
        if bytes.len() != IMAGE_BYTES {
            return Err(CoreError::data(format!(
                "raw image {} has {} bytes, expected {}",
                path.display(),
                bytes.len(),
                IMAGE_BYTES
            ))
            .into());
        }
        let plane = CANVAS * CANVAS;
        image::RgbImage::from_fn(CANVAS as u32, CANVAS as u32, |x, y| {
            let p = y as usize * CANVAS + x as usize;
            image::Rgb([bytes[p], bytes[plane + p], bytes[2 * plane + p]])
        })
    } else {
        image::open(path)?.to_rgb8()
    };
    let sized = if (img.width(), img.height()) == (side as u32, side as u32) {
        img.clone()
    } else {
        image::imageops::resize(
            &img,
            side as u32,
            side as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    let mut t = Tensor::zeros(&[1, 3, side, side]);
    let data = t.data_mut();
    for (x, y, px) in sized.enumerate_pixels() {
        let p = y as usize * side + x as usize;
        for c in 0..3 {
            data[c * side * side + p] = px[c] as f64 / 255.0;
        }
    }
    Ok((t, img, id))
}

fn draw_box(img: &mut image::RgbImage, det: &Detection) {
    const PALETTE: [[u8; 3]; 6] = [
        [235, 64, 52],
        [52, 199, 89],
        [64, 120, 235],
        [235, 200, 52],
        [200, 64, 200],
        [52, 200, 200],
    ];
    let color = image::Rgb(PALETTE[det.class % PALETTE.len()]);
    let (w, h) = (img.width(), img.height());
    let px = |v: f64, extent: u32| -> u32 {
        (v * extent as f64).round().clamp(0.0, extent as f64 - 1.0) as u32
    };
    let (x1, y1) = (px(det.bbox.x1, w), px(det.bbox.y1, h));
    let (x2, y2) = (px(det.bbox.x2, w), px(det.bbox.y2, h));
    for x in x1..=x2 {
        img.put_pixel(x, y1, color);
        img.put_pixel(x, y2, color);
    }
    for y in y1..=y2 {
        img.put_pixel(x1, y, color);
        img.put_pixel(x2, y, color);
    }
}

fn cmd_detect(a: DetectArgs) -> anyhow::Result<()> {
    let (cfg, model, store) = load_model(&a.checkpoint)?;
    let (tensor, mut overlay, id) = read_image(&a.image, cfg.input_size)?;
    let dets = detect(&model, &store, tensor, &cfg.detect_opts())?;

    cfg.save_resolved(&a.out)?;
    write_run_info(&a.out)?;
    let records: Vec<DetRecord> =
        dets.iter().map(|d| DetRecord { image_id: id.clone(), det: d.clone() }).collect();
    let mut dump = BufWriter::new(fs::File::create(a.out.join("detections.txt"))?);
    write_detections(&mut dump, &records)?;
    dump.flush()?;

    let kept: Vec<&Detection> = dets.iter().filter(|d| d.score >= a.min_score).collect();
    for d in &kept {
        draw_box(&mut overlay, d);
    }
    let overlay_path = a.out.join("overlay.png");
    overlay.save(&overlay_path)?;

    println!("{} detections, {} at score >= {}", dets.len(), kept.len(), a.min_score);
    for d in kept.iter().take(20) {
        println!(
            "  {} {:.3} [{:.3} {:.3} {:.3} {:.3}]",
            class_name(cfg.num_classes, d.class),
            d.score,
            d.bbox.x1,
            d.bbox.y1,
            d.bbox.x2,
            d.bbox.y2
        );
    }
    if kept.len() > 20 {
        println!("  ... and {} more (see the dump)", kept.len() - 20);
    }
    println!("overlay: {}", overlay_path.display());
    Ok(())
}

fn cmd_diagnose(a: DiagnoseArgs) -> anyhow::Result<()> {
    let file = fs::File::open(&a.dets)
        .with_context(|| format!("opening detection dump {}", a.dets.display()))?;
    let records = read_detections(BufReader::new(file))?;
    let retained = records.iter().filter(|r| r.det.score >= a.min_score).count();
    let rate = box_in_box_rate_pooled(&records, a.containment, a.min_score);
    println!("box_in_box_rate={:.6}", rate);
    println!("retained {} of {} detections at score >= {}", retained, records.len(), a.min_score);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    let (cfg, model, store) = load_model(&a.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut images: Tensor<f64> =
        Tensor::randn(&[a.batch, 3, cfg.input_size, cfg.input_size], 0.25, &mut rng);
    for v in images.data_mut() {
        *v = (*v + 0.5).clamp(0.0, 1.0);
    }
    let report = benchmark_fps(&model, &store, &images, a.repeats)?;
    let macs = mac_count(&cfg.model_config());
    println!("{}", report);
    println!("macs.backbone={}", macs.backbone);
    println!("macs.enrichment={}", macs.enrichment);
    println!("macs.heads={}", macs.heads);
    println!("macs.total={}", macs.total());
    Ok(())
}
