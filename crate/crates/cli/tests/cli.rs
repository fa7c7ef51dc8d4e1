use std::path::Path;
use std::process::{Command, Output};

use sfp_core::eval::pose_error;
use sfp_core::keypoint_io::decode_keypoints;
use sfp_core::localize::ReportRecord;
use sfp_core::map::{header_bytes, save_map, LandmarkMap};
use sfp_core::pyramid::{DescriptorMode, LevelPlan};

fn sfp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfp")).args(args).current_dir(cwd).output().expect("sfp runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = sfp(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    sfp(args, cwd).status.code().expect("exit code")
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

fn scene(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "scene", "--out", "scene"];
    args.extend_from_slice(extra);
    ok(&args, dir);
}

#[test]
fn noiseless_pipeline_recovers_query_poses() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    scene(d, &[]);
    ok(&["build-map", "--keypoints", "scene/map", "--intrinsics", "scene/intrinsics.json", "--out", "map.sfpm"], d);
    ok(&["localize", "--map", "map.sfpm", "--queries", "scene/queries", "--intrinsics", "scene/intrinsics.json", "--out", "rep.jsonl", "--strict"], d);
    let summary = json(&ok(&["evaluate", "--reports", "rep.jsonl", "--ground-truth", "scene/queries", "--map", "map.sfpm", "--json"], d));
    assert_eq!(summary["localized"], 4);
    assert!(summary["median_cm"].as_f64().unwrap() / 100.0 < 1e-6, "{summary}");
    assert!(summary["median_deg"].as_f64().unwrap() < 1e-6, "{summary}");

    let table = ok(&["evaluate", "--reports", "rep.jsonl", "--ground-truth", "scene/queries", "--map", "map.sfpm"], d);
    assert!(table.starts_with("method"), "{table}");
    assert!(table.contains("localized 4 of 4"), "{table}");
}

#[test]
fn short_map_localizes_full_queries() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    scene(d, &[]);
    ok(&["build-map", "--keypoints", "scene/map", "--intrinsics", "scene/intrinsics.json", "--out", "map.sfpm", "--mode", "short"], d);
    let stats = json(&ok(&["map-stats", "map.sfpm", "--json"], d));
    assert_eq!(stats["mode"], "short");
    ok(&["localize", "--map", "map.sfpm", "--queries", "scene/queries", "--intrinsics", "scene/intrinsics.json", "--out", "rep.jsonl", "--strict"], d);
    let summary = json(&ok(&["evaluate", "--reports", "rep.jsonl", "--ground-truth", "scene/queries", "--json"], d));
    assert!(summary["median_cm"].as_f64().unwrap() / 100.0 < 1e-6, "{summary}");
}

#[test]
fn empty_map_stats_is_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    save_map(&LandmarkMap::empty(LevelPlan::default(), DescriptorMode::Full), &d.join("empty.sfpm")).unwrap();
    let stats = json(&ok(&["map-stats", "empty.sfpm", "--json"], d));
    assert_eq!(stats["landmarks"], 0);
    assert_eq!(stats["total_bytes"], header_bytes(3));
    assert_eq!(std::fs::metadata(d.join("empty.sfpm")).unwrap().len(), header_bytes(3));
}

#[test]
fn shorten_halves_descriptor_payload() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    scene(d, &[]);
    ok(&["build-map", "--keypoints", "scene/map", "--intrinsics", "scene/intrinsics.json", "--out", "full.sfpm"], d);
    ok(&["shorten", "full.sfpm", "--out", "short.sfpm"], d);
    let full = json(&ok(&["map-stats", "full.sfpm", "--json"], d));
    let short = json(&ok(&["map-stats", "short.sfpm", "--json"], d));
    let (f, s) = (full["descriptor_bytes"].as_u64().unwrap(), short["descriptor_bytes"].as_u64().unwrap());
    assert_eq!(f, 2 * s);
    for (name, stats) in [("full.sfpm", &full), ("short.sfpm", &short)] {
        assert_eq!(std::fs::metadata(d.join(name)).unwrap().len(), stats["total_bytes"].as_u64().unwrap());
    }
    let text = ok(&["map-stats", "short.sfpm"], d);
    assert!(text.contains(&format!("descriptor_bytes {s}\n")), "{text}");
    assert_eq!(code(&["shorten", "short.sfpm", "--out", "again.sfpm"], d), 4);
}

#[test]
fn exit_codes_follow_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&["no-such-command"], d), 2);
    assert_eq!(code(&["map-stats"], d), 2);
    assert_eq!(code(&["map-stats", "x.sfpm", "--tau", "2"], d), 2);
    std::fs::write(d.join("bad.toml"), "[localize]\ntopk = 2\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "map-stats", "x.sfpm"], d), 2);
    assert_eq!(code(&["map-stats", "missing.sfpm"], d), 3);
    assert_eq!(code(&["--config", "missing.toml", "map-stats", "x.sfpm"], d), 3);
    std::fs::write(d.join("junk.sfpm"), b"SFPM\x01\x00\x03").unwrap();
    assert_eq!(code(&["map-stats", "junk.sfpm"], d), 3);

    scene(d, &["--disjoint"]);
    ok(&["build-map", "--keypoints", "scene/map", "--intrinsics", "scene/intrinsics.json", "--out", "map.sfpm"], d);
    let args = ["localize", "--map", "map.sfpm", "--queries", "scene/queries", "--intrinsics", "scene/intrinsics.json", "--out", "rep.jsonl"];
    assert_eq!(code(&args, d), 0);
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(code(&strict, d), 4);
    let lines = std::fs::read_to_string(d.join("rep.jsonl")).unwrap();
    let outside = lines.lines().map(|l| ReportRecord::from_line(l).unwrap()).find(|r| r.query == "outside-000").unwrap();
    assert!(!outside.success);
    assert_eq!(code(&["build-map", "--keypoints", "scene/map", "--intrinsics", "scene/intrinsics.json", "--out", "m.sfpm", "--levels", "4"], d), 2);
}

#[test]
fn runs_are_reproducible_and_flags_override_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.toml"), "[synth]\nseed = 5\nnoise_px = 1.0\nn_landmarks = 120\n").unwrap();
    ok(&["--config", "c.toml", "synth", "scene", "--out", "a"], d);
    ok(&["--config", "c.toml", "synth", "scene", "--out", "b"], d);
    ok(&["--config", "c.toml", "--seed", "6", "synth", "scene", "--out", "c"], d);
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/map/frame-000.kp"), read("b/map/frame-000.kp"));
    assert_ne!(read("a/map/frame-000.kp"), read("c/map/frame-000.kp"));
    let cfg = std::fs::read_to_string(d.join("c/scene.toml")).unwrap();
    assert!(cfg.contains("seed = 6") && cfg.contains("noise_px = 1.0") && cfg.contains("n_landmarks = 120"), "{cfg}");

    ok(&["build-map", "--keypoints", "a/map", "--intrinsics", "a/intrinsics.json", "--out", "a.sfpm"], d);
    let poses = |name: &str| -> Vec<Option<sfp_core::geometry::Pose>> {
        ok(&["localize", "--map", "a.sfpm", "--queries", "a/queries", "--intrinsics", "a/intrinsics.json", "--out", name], d);
        std::fs::read_to_string(d.join(name)).unwrap().lines().map(|l| ReportRecord::from_line(l).unwrap().final_pose().unwrap()).collect()
    };
    let (p1, p2) = (poses("r1.jsonl"), poses("r2.jsonl"));
    assert_eq!(p1, p2);
    assert!(p1.iter().all(Option::is_some));
    let gt = sfp_core::eval::parse_pose_matrix(&std::fs::read_to_string(d.join("a/queries/query-000.pose.txt")).unwrap()).unwrap();
    assert!(pose_error(p1[0].as_ref().unwrap(), &gt).translation < 0.05);
}

#[test]
fn homography_pairs_mma_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth", "homography", "--out", "pairs", "--seed", "3"], d);
    let curve: Vec<(f64, f64)> = ok(&["mma", "--pairs", "pairs"], d)
        .lines()
        .map(|l| {
            let mut it = l.split_whitespace().map(|v| v.parse::<f64>().unwrap());
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect();
    assert_eq!(curve.len(), 10);
    assert!(curve.windows(2).all(|w| w[1].1 >= w[0].1));
    assert!(curve.iter().filter(|c| c.0 >= 2.0).all(|c| c.1 >= 0.99), "{curve:?}");
    assert_eq!(code(&["mma", "--pairs", "nowhere"], d), 3);
}

#[test]
fn train_then_extract_writes_keypoint_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let images = d.join("imgs");
    std::fs::create_dir(&images).unwrap();
    for i in 0..2u32 {
        let img = image::GrayImage::from_fn(40, 36, |x, y| image::Luma([((x * 7 + y * 3 + i * 50) % 256) as u8]));
        img.save(images.join(format!("f{i}.color.png"))).unwrap();
        let depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_pixel(40, 36, image::Luma([2000]));
        depth.save(images.join(format!("f{i}.depth.png"))).unwrap();
        std::fs::write(images.join(format!("f{i}.pose.txt")), "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n").unwrap();
    }
    let out = ok(&["train-toy", "--steps", "3", "--out", "ck.json", "--seed", "2"], d);
    assert!(out.contains("trained 3 steps"), "{out}");
    assert_eq!(std::fs::read_to_string(d.join("ck.trace.jsonl")).unwrap().lines().count(), 3);
    ok(&["train-toy", "--steps", "3", "--out", "ck2.json", "--seed", "2"], d);
    assert_eq!(std::fs::read(d.join("ck.json")).unwrap(), std::fs::read(d.join("ck2.json")).unwrap());

    ok(&["extract", "--checkpoint", "ck.json", "--images", "imgs", "--out", "kps", "--tau", "0.2"], d);
    let kps = decode_keypoints(&std::fs::read(d.join("kps/f0.kp")).unwrap()).unwrap();
    let depths = std::fs::read_to_string(d.join("kps/f0.kpdepth")).unwrap();
    assert_eq!(depths.lines().count(), kps.len());
    assert!(depths.lines().all(|l| l.parse::<f64>().unwrap() == 2.0));
    assert!(d.join("kps/f1.pose.txt").is_file());
    assert!(kps.iter().all(|k| k.pixel[0] <= 40.0 && k.pixel[1] <= 32.0));
    assert_eq!(code(&["extract", "--checkpoint", "missing.json", "--images", "imgs", "--out", "k2"], d), 3);
    assert_eq!(code(&["train-toy", "--out", "x.json", "--lambda", "-1"], d), 2);
}
