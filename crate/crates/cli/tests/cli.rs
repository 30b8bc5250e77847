//! End-to-end tests driving the `rundet` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use rundet_core::boxes::{write_detections, DetRecord, Detection};
use rundet_core::shapesdata::Dataset;

fn rundet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rundet"))
        .args(args)
        .output()
        .expect("spawning rundet")
}

fn ok(args: &[&str]) -> String {
    let out = rundet(args);
    assert!(
        out.status.success(),
        "rundet {:?} failed with {:?}\nstdout: {}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = rundet(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "rundet {:?} exited {:?}, expected {}\nstderr: {}",
        args,
        out.status.code(),
        code,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(path: &Path, mode: &str, head: &str, iters: u64, lr: &str) {
    let text = format!(
        "backbone.stage_widths=8,16,16\n\
         backbone.source_stages=2,3\n\
         resblock.mode={mode}\n\
         resblock.depth=8\n\
         head.mode={head}\n\
         schedule.base_lr={lr}\n\
         schedule.milestones=\n\
         schedule.total_iters={iters}\n\
         schedule.batch_size=2\n\
         schedule.seed=11\n\
         data.path={data}\n",
        data = fixture().data.display(),
    );
    fs::write(path, text).unwrap();
}

struct Fixture {
    root: PathBuf,
    data: PathBuf,
    run2: PathBuf,
    run3: PathBuf,
}

/// Dataset plus one 2-way and one warm-started 3-way training run,
/// built once and shared by every test that only reads them.
fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let root = std::env::temp_dir().join("rundet_cli_fixture");
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).unwrap();
        let data = root.join("data");
        let run2 = root.join("run2way");
        let run3 = root.join("run3way");
        let f = Fixture { root: root.clone(), data: data.clone(), run2, run3 };

        let out = rundet(&["gen-data", "--n", "24", "--seed", "5", "--out", data.to_str().unwrap()]);
        assert!(out.status.success(), "gen-data failed: {:?}", out);

        let cfg2 = root.join("cfg_2way.txt");
        let text = format!(
            "backbone.stage_widths=8,16,16\n\
             backbone.source_stages=2,3\n\
             resblock.mode=2way\n\
             resblock.depth=8\n\
             schedule.base_lr=0.0005\n\
             schedule.milestones=\n\
             schedule.total_iters=50\n\
             schedule.batch_size=2\n\
             schedule.seed=11\n\
             data.path={}\n",
            data.display()
        );
        fs::write(&cfg2, text.clone()).unwrap();
        let cfg3 = root.join("cfg_3way.txt");
        fs::write(
            &cfg3,
            text.replace("resblock.mode=2way", "resblock.mode=3way")
                .replace("schedule.total_iters=50", "schedule.total_iters=20"),
        )
        .unwrap();

        let out = rundet(&[
            "train",
            "--config",
            cfg2.to_str().unwrap(),
            "--stage",
            "2way",
            "--out",
            f.run2.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "2way training failed: {:?}", out);
        let out = rundet(&[
            "train",
            "--config",
            cfg3.to_str().unwrap(),
            "--stage",
            "3way",
            "--resume",
            f.run2.join("model.ckpt").to_str().unwrap(),
            "--out",
            f.run3.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "3way training failed: {:?}", out);
        f
    })
}

#[test]
fn gen_data_is_deterministic() {
    let root = std::env::temp_dir().join("rundet_cli_gen");
    let _ = fs::remove_dir_all(&root);
    let a = root.join("a");
    let b = root.join("b");
    for dir in [&a, &b] {
        let out = ok(&["gen-data", "--n", "100", "--seed", "0", "--out", dir.to_str().unwrap()]);
        assert!(out.contains("wrote 100 samples"), "{}", out);
        assert!(dir.join("run_info.txt").exists());
    }
    let ma = fs::read(a.join("manifest.txt")).unwrap();
    let mb = fs::read(b.join("manifest.txt")).unwrap();
    assert_eq!(ma, mb, "manifests (with checksums) differ between identical invocations");
    assert_eq!(fs::read_to_string(a.join("manifest.txt")).unwrap().lines().count(), 100);
}

#[test]
fn gen_data_rejects_zero_samples() {
    let err = fails_with(&["gen-data", "--n", "0", "--seed", "0", "--out", "/tmp/never"], 1);
    assert!(err.contains("--n"), "{}", err);
}

#[test]
fn training_writes_a_self_describing_run() {
    let f = fixture();
    assert!(f.run2.join("model.ckpt").exists());
    assert!(f.run2.join("config.resolved").exists());
    assert!(f.run2.join("run_info.txt").exists());

    let log = fs::read_to_string(f.run2.join("loss_log.txt")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 50);
    let last: Vec<&str> = lines.last().unwrap().split_whitespace().collect();
    assert_eq!(last.len(), 5, "iteration lr loc conf total: {:?}", last);
    assert_eq!(last[0].parse::<u64>().unwrap(), 50);
    let nums: Vec<f64> = last[1..].iter().map(|s| s.parse().unwrap()).collect();
    assert!(nums.iter().all(|v| v.is_finite()));
    // resolved echo records the architecture for later commands
    let resolved = fs::read_to_string(f.run2.join("config.resolved")).unwrap();
    assert!(resolved.contains("resblock.mode=2way"), "{}", resolved);
}

#[test]
fn three_way_stage_requires_resume() {
    let f = fixture();
    let cfg = f.root.join("cfg_noresume.txt");
    write_config(&cfg, "3way", "unified", 5, "0.0005");
    let err = fails_with(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--stage",
            "3way",
            "--out",
            f.root.join("noresume").to_str().unwrap(),
        ],
        1,
    );
    assert!(err.contains("--resume"), "{}", err);
}

#[test]
fn seeded_training_reruns_identically() {
    let f = fixture();
    let cfg = f.root.join("cfg_det.txt");
    write_config(&cfg, "2way", "unified", 20, "0.0005");
    let (da, db) = (f.root.join("det_a"), f.root.join("det_b"));
    for dir in [&da, &db] {
        ok(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--stage",
            "2way",
            "--out",
            dir.to_str().unwrap(),
        ]);
    }
    assert_eq!(
        fs::read(da.join("loss_log.txt")).unwrap(),
        fs::read(db.join("loss_log.txt")).unwrap(),
        "loss logs differ between identical seeded runs"
    );
    assert_eq!(
        fs::read(da.join("model.ckpt")).unwrap(),
        fs::read(db.join("model.ckpt")).unwrap(),
        "checkpoints differ between identical seeded runs"
    );
}

#[test]
fn eval_scores_a_perfect_dump_at_map_one() {
    let f = fixture();
    let ds = Dataset::open(&f.data).unwrap();
    let mut records = Vec::new();
    for s in ds.iter() {
        let s = s.unwrap();
        for g in &s.boxes {
            records.push(DetRecord {
                image_id: s.id.to_string(),
                det: Detection { class: g.class, score: 0.9, bbox: g.bbox },
            });
        }
    }
    let dump = f.root.join("oracle_dump.txt");
    let mut buf = Vec::new();
    write_detections(&mut buf, &records).unwrap();
    fs::write(&dump, buf).unwrap();

    let out_dir = f.root.join("eval_oracle");
    let stdout = ok(&[
        "eval",
        "--dets",
        dump.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("mAP@0.5: 1.0000"), "{}", stdout);
    let report = fs::read_to_string(out_dir.join("eval_report.txt")).unwrap();
    assert!(report.contains("map=1.000000"), "{}", report);
    assert!(report.contains("recall_at_100=1.000000"), "{}", report);
}

#[test]
fn eval_checkpoint_writes_report_and_dump() {
    let f = fixture();
    let out_dir = f.root.join("eval3way");
    ok(&[
        "eval",
        "--checkpoint",
        f.run3.join("model.ckpt").to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    let report = fs::read_to_string(out_dir.join("eval_report.txt")).unwrap();
    assert!(report.contains("map="), "{}", report);
    assert!(out_dir.join("detections.txt").exists());
    assert!(out_dir.join("config.resolved").exists());
}

#[test]
fn ablation_chain_produces_three_reports() {
    let f = fixture();
    // baseline: no enrichment, per-level heads straight off the backbone
    let cfg = f.root.join("cfg_base.txt");
    write_config(&cfg, "none", "separate", 20, "0.0005");
    let base_run = f.root.join("run_base");
    ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--stage",
        "2way",
        "--out",
        base_run.to_str().unwrap(),
    ]);

    let mut maps = Vec::new();
    for (run, tag) in [(&base_run, "base"), (&f.run2, "2way"), (&f.run3, "3way")] {
        let out_dir = f.root.join(format!("eval_{}", tag));
        ok(&[
            "eval",
            "--checkpoint",
            run.join("model.ckpt").to_str().unwrap(),
            "--data",
            f.data.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        let report = fs::read_to_string(out_dir.join("eval_report.txt")).unwrap();
        let map_line = report.lines().find(|l| l.starts_with("map=")).unwrap();
        maps.push(map_line["map=".len()..].parse::<f64>().unwrap());
    }
    assert_eq!(maps.len(), 3);
    assert!(maps.iter().all(|m| (0.0..=1.0).contains(m)), "{:?}", maps);
}

#[test]
fn diagnose_handles_single_and_empty_dumps() {
    let f = fixture();
    let single = f.root.join("single.txt");
    fs::write(&single, "7 0 0.900000 0.100000 0.100000 0.400000 0.400000\n").unwrap();
    let out = ok(&["diagnose", "--dets", single.to_str().unwrap()]);
    assert!(out.contains("box_in_box_rate=0.000000"), "{}", out);

    let empty = f.root.join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = ok(&["diagnose", "--dets", empty.to_str().unwrap()]);
    assert!(out.contains("box_in_box_rate=0.000000"), "{}", out);
}

#[test]
fn corrupt_checkpoint_exits_with_io_code() {
    let f = fixture();
    let dir = f.root.join("corrupt");
    fs::create_dir_all(&dir).unwrap();
    let whole = fs::read(f.run2.join("model.ckpt")).unwrap();
    fs::write(dir.join("model.ckpt"), &whole[..whole.len() / 3]).unwrap();
    fs::copy(f.run2.join("config.resolved"), dir.join("config.resolved")).unwrap();
    let err = fails_with(
        &[
            "bench",
            "--checkpoint",
            dir.join("model.ckpt").to_str().unwrap(),
            "--repeats",
            "1",
            "--batch",
            "1",
        ],
        2,
    );
    assert!(err.contains("truncated"), "{}", err);
}

#[test]
fn divergent_training_exits_with_numerical_code() {
    let f = fixture();
    let cfg = f.root.join("cfg_diverge.txt");
    write_config(&cfg, "2way", "unified", 10, "1e18");
    let err = fails_with(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--stage",
            "2way",
            "--out",
            f.root.join("diverge").to_str().unwrap(),
        ],
        3,
    );
    assert!(err.contains("diverged"), "{}", err);
}

#[test]
fn detect_writes_dump_and_overlay() {
    let f = fixture();
    let out_dir = f.root.join("detect");
    let stdout = ok(&[
        "detect",
        "--checkpoint",
        f.run3.join("model.ckpt").to_str().unwrap(),
        "--image",
        f.data.join("images/sample_00000.rgb").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--min-score",
        "0.3",
    ]);
    assert!(stdout.contains("detections"), "{}", stdout);
    assert!(out_dir.join("detections.txt").exists());
    let overlay = image::open(out_dir.join("overlay.png")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (64, 64));
}

#[test]
fn bench_reports_throughput_and_mac_counts() {
    let f = fixture();
    let stdout = ok(&[
        "bench",
        "--checkpoint",
        f.run3.join("model.ckpt").to_str().unwrap(),
        "--repeats",
        "2",
        "--batch",
        "2",
    ]);
    assert!(stdout.contains("img/s"), "{}", stdout);
    let macs: Vec<&str> = stdout.lines().filter(|l| l.starts_with("macs.")).collect();
    assert_eq!(macs.len(), 4, "{}", stdout);
    assert!(stdout.contains("macs.total="), "{}", stdout);
}
