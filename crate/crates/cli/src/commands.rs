use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sfp_core::eval::{
    median, mma_curve_text, parse_homography, pose_error, results_table, scan_homography_sequence, synth_homography_pairs,
    MmaPair, MutualNearestMatcher, ResultRow, SynthScene,
};
use sfp_core::extract::{extract as extract_keypoints, Keypoint};
use sfp_core::localize::{localize as localize_query, QueryFrame, ReportRecord};
use sfp_core::map::{self, load_map, save_map, shorten_descriptors, LandmarkMap, MapConfig, PosedKeypoints};
use sfp_core::net::{encode, load_checkpoint, mean_kept_keypoints, save_checkpoint, synthetic_images, train, LossReport, NetConfig, NetParams, TrainBatch};
use sfp_core::pyramid::DescriptorMode;

use crate::config::Settings;
use crate::files::{self, io_err};
use crate::Failure;

/// Image files of a directory as `(stem, path)`; `<stem>.color.png` and
/// `<stem>.png` are accepted, depth images are skipped.
fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    let mut out: Vec<(String, PathBuf)> = files::list_with_suffix(dir, ".png")?
        .into_iter()
        .filter(|(stem, _)| !stem.ends_with(".depth"))
        .map(|(stem, p)| (stem.strip_suffix(".color").unwrap_or(&stem).to_string(), p))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Failure::Pipeline(format!("{}: no PNG images", dir.display())));
    }
    Ok(out)
}

#[derive(Serialize)]
struct TraceLine<'a> {
    step: usize,
    #[serde(flatten)]
    report: &'a LossReport,
}

fn write_trace(path: &Path, trace: &[LossReport]) -> Result<(), Failure> {
    let text: String = trace
        .iter()
        .enumerate()
        .map(|(step, report)| serde_json::to_string(&TraceLine { step, report }).expect("serializable") + "\n")
        .collect();
    files::write(path, text)
}

pub fn train_toy(s: &Settings, images: Option<&Path>, out: &Path, trace: Option<&Path>) -> Result<(), Failure> {
    let t = &s.train;
    if t.steps == 0 || !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
        return Err(Failure::Usage("training needs steps >= 1 and a positive learning rate".into()));
    }
    let mut config = NetConfig::toy();
    config.lambda = t.lambda;
    let divisor = config.divisor();
    let tensors = match images {
        Some(dir) => list_images(dir)?
            .iter()
            .map(|(_, p)| files::read_image(p, config.in_channels, divisor))
            .collect::<Result<Vec<_>, _>>()?,
        None => {
            if t.images == 0 || t.size < divisor || !t.size.is_multiple_of(divisor) {
                return Err(Failure::Usage(format!("synthetic training images must be a positive multiple of {divisor} pixels")));
            }
            synthetic_images(t.seed, t.images, t.size, t.size)
        }
    };
    let batch = TrainBatch::new(tensors)?;
    let params = NetParams::init(config, t.seed)?;
    let trace_path = trace.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("trace.jsonl"));
    let start = Instant::now();
    let outcome = match train(&batch, params, t.steps, t.learning_rate, t.seed) {
        Ok(o) => o,
        Err(d) => {
            write_trace(&trace_path, &d.trace)?;
            return Err(Failure::Pipeline(format!("{} (trace in {})", d.error, trace_path.display())));
        }
    };
    save_checkpoint(&outcome.params, out)?;
    write_trace(&trace_path, &outcome.trace)?;
    let first = outcome.trace.first().expect("at least one step");
    let last = outcome.trace.last().expect("at least one step");
    let kept = mean_kept_keypoints(&outcome.params, &batch, s.extract.tau)?;
    println!(
        "trained {} steps on {} images in {:.1} s: loss {:.4} -> {:.4}, {:.1} kept cells per image at tau {}",
        t.steps,
        batch.len(),
        start.elapsed().as_secs_f64(),
        first.total,
        last.total,
        kept,
        s.extract.tau
    );
    println!("checkpoint {}; trace {}", out.display(), trace_path.display());
    Ok(())
}

pub fn extract(s: &Settings, checkpoint: &Path, images: &Path, out: &Path) -> Result<(), Failure> {
    let params = load_checkpoint(checkpoint).map_err(|e| io_err(checkpoint, e))?;
    let cfg = s.extract.to_config();
    let list = list_images(images)?;
    files::create_dir(out)?;
    let divisor = params.config.divisor();
    let mut total = 0;
    for (stem, path) in &list {
        let image = files::read_image(path, params.config.in_channels, divisor)?;
        let pyramid = encode(&image, &params)?;
        let keypoints: Vec<Keypoint> = extract_keypoints(&pyramid, &cfg)?.into_iter().flatten().collect();
        files::write_keypoints(&out.join(format!("{stem}.kp")), &keypoints)?;
        let pose = images.join(format!("{stem}.pose.txt"));
        if pose.is_file() {
            files::write_pose(&out.join(format!("{stem}.pose.txt")), &files::read_pose(&pose)?)?;
        }
        let depth = images.join(format!("{stem}.depth.png"));
        if depth.is_file() {
            let d = files::DepthImage::open(&depth)?;
            let depths: Vec<f64> = keypoints.iter().map(|k| d.sample(k.pixel)).collect();
            files::write_depths(&out.join(format!("{stem}.kpdepth")), &depths)?;
        }
        total += keypoints.len();
    }
    println!("extracted {total} keypoints from {} images into {}", list.len(), out.display());
    Ok(())
}

fn keep_levels(keypoints: Vec<Keypoint>, depths: Option<Vec<f64>>, levels: &[u8]) -> (Vec<Keypoint>, Option<Vec<f64>>) {
    if levels.is_empty() {
        return (keypoints, depths);
    }
    let keep: Vec<bool> = keypoints.iter().map(|k| levels.contains(&k.level)).collect();
    let depths = depths.map(|d| d.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(d, _)| d).collect());
    (keypoints.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(kp, _)| kp).collect(), depths)
}

pub fn build_map(s: &Settings, dir: &Path, intrinsics: &Path, out: &Path) -> Result<(), Failure> {
    let plan = s.plan()?;
    if let Some(&l) = s.map.levels.iter().find(|&&l| plan.level(l).is_none()) {
        return Err(Failure::Usage(format!("level {l} is not in the {}-level plan", plan.len())));
    }
    let k = files::read_intrinsics(intrinsics)?;
    let mut frames = Vec::new();
    for (stem, path) in files::list_with_suffix(dir, ".kp")? {
        let keypoints = files::read_keypoints(&path)?;
        let pose = files::read_pose(&dir.join(format!("{stem}.pose.txt")))?;
        let depth_path = dir.join(format!("{stem}.kpdepth"));
        let depths = if depth_path.is_file() { Some(files::read_depths(&depth_path)?) } else { None };
        if depths.as_ref().is_some_and(|d| d.len() != keypoints.len()) {
            return Err(io_err(&depth_path, format!("depth count differs from the {} keypoints", keypoints.len())));
        }
        let (keypoints, depths) = keep_levels(keypoints, depths, &s.map.levels);
        frames.push(PosedKeypoints { keypoints, pose, depths, global: None });
    }
    if frames.is_empty() {
        return Err(Failure::Pipeline(format!("{}: no keypoint files", dir.display())));
    }
    let config = MapConfig {
        merge_radius: s.map.merge_radius,
        min_similarity: s.map.min_similarity,
        max_reprojection_px: s.map.max_reprojection_px,
        ..MapConfig::new(plan, k)
    };
    let mut built = map::build_map(&frames, &config)?;
    if s.map.mode == DescriptorMode::Short {
        built = shorten_descriptors(&built)?;
    }
    save_map(&built, out)?;
    let stats = map::map_stats(&built);
    println!(
        "map {}: {} landmarks from {} frames, {} bytes ({:?} descriptors)",
        out.display(),
        stats.landmarks,
        stats.frames,
        stats.total_bytes,
        stats.mode
    );
    Ok(())
}

fn read_map(path: &Path) -> Result<LandmarkMap, Failure> {
    load_map(path).map_err(|e| io_err(path, e))
}

pub fn stats_text(r: &map::SizeReport) -> String {
    let mut out = format!("mode {}\n", if r.mode == DescriptorMode::Full { "full" } else { "short" });
    for (name, v) in [
        ("landmarks", r.landmarks),
        ("frames", r.frames),
        ("header_bytes", r.header_bytes),
        ("position_bytes", r.position_bytes),
        ("landmark_meta_bytes", r.landmark_meta_bytes),
        ("descriptor_bytes", r.descriptor_bytes),
    ] {
        out += &format!("{name} {v}\n");
    }
    for (level, b) in &r.descriptor_bytes_per_level {
        out += &format!("descriptor_bytes_level_{level} {b}\n");
    }
    for (name, v) in [
        ("full_descriptor_bytes", r.full_descriptor_bytes),
        ("short_descriptor_bytes", r.short_descriptor_bytes),
        ("index_bytes", r.index_bytes),
        ("total_bytes", r.total_bytes),
    ] {
        out += &format!("{name} {v}\n");
    }
    out + &format!("total_mb {:.6}\n", r.total_megabytes())
}

pub fn map_stats(path: &Path, json: bool) -> Result<(), Failure> {
    let report = map::map_stats(&read_map(path)?);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    } else {
        print!("{}", stats_text(&report));
    }
    Ok(())
}

pub fn shorten(path: &Path, out: &Path) -> Result<(), Failure> {
    let full = read_map(path)?;
    let short = shorten_descriptors(&full)?;
    save_map(&short, out)?;
    let (a, b) = (map::map_stats(&full), map::map_stats(&short));
    println!(
        "descriptor bytes {} -> {}; total {} -> {} bytes; wrote {}",
        a.descriptor_bytes,
        b.descriptor_bytes,
        a.total_bytes,
        b.total_bytes,
        out.display()
    );
    Ok(())
}

pub fn localize(s: &Settings, map_path: &Path, queries: &Path, intrinsics: &Path, out: &Path, strict: bool) -> Result<(), Failure> {
    let mut m = read_map(map_path)?;
    if s.map.mode == DescriptorMode::Short && m.mode == DescriptorMode::Full {
        m = shorten_descriptors(&m)?;
    }
    let config = s.localizer(&m.plan).map_err(|e| Failure::Usage(format!("[localize]: {e}")))?;
    config.validate(&m.plan).map_err(|e| Failure::Usage(e.to_string()))?;
    let k = files::read_intrinsics(intrinsics)?;
    let frames: Vec<QueryFrame> = files::list_with_suffix(queries, ".kp")?
        .into_iter()
        .map(|(stem, path)| Ok(QueryFrame { id: stem, keypoints: files::read_keypoints(&path)?, global: None, intrinsics: k }))
        .collect::<Result<_, Failure>>()?;
    if frames.is_empty() {
        return Err(Failure::Pipeline(format!("{}: no query keypoint files", queries.display())));
    }
    let results = frames.par_iter().map(|q| localize_query(q, &m, &config)).collect::<Result<Vec<_>, _>>()?;
    let text: String = results.iter().map(|r| ReportRecord::from_result(r).to_line() + "\n").collect();
    files::write(out, text)?;
    let ok = results.iter().filter(|r| r.success).count();
    println!("localized {ok} of {} queries; report {}", results.len(), out.display());
    if strict && ok < results.len() {
        let failed: Vec<&str> = results.iter().filter(|r| !r.success).map(|r| r.query.as_str()).collect();
        return Err(Failure::Pipeline(format!("queries not localized: {}", failed.join(", "))));
    }
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    #[serde(flatten)]
    row: &'a ResultRow,
    queries: usize,
    localized: usize,
}

pub fn evaluate(reports: &Path, gt_dir: &Path, map_path: Option<&Path>, method: &str, out: Option<&Path>, json: bool) -> Result<(), Failure> {
    files::require_dir(gt_dir)?;
    let records = files::read_text(reports)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| ReportRecord::from_line(l).map_err(|e| io_err(reports, e)))
        .collect::<Result<Vec<_>, _>>()?;
    if records.is_empty() {
        return Err(Failure::Pipeline(format!("{}: no report lines", reports.display())));
    }
    let (mut cm, mut deg) = (Vec::new(), Vec::new());
    let mut ok = 0;
    for r in &records {
        let gt = files::read_pose(&gt_dir.join(format!("{}.pose.txt", r.query)))?;
        match r.final_pose().map_err(|e| io_err(reports, e))?.filter(|_| r.success) {
            Some(pose) => {
                let e = pose_error(&pose, &gt);
                cm.push(e.translation * 100.0);
                deg.push(e.rotation);
                ok += 1;
            }
            None => {
                cm.push(f64::INFINITY);
                deg.push(f64::INFINITY);
            }
        }
    }
    let map_mb = match map_path {
        Some(p) => map::map_stats(&read_map(p)?).total_megabytes(),
        None => f64::NAN,
    };
    let row = ResultRow { method: method.to_string(), map_mb, median_cm: median(&cm)?, median_deg: median(&deg)? };
    let text = if json {
        serde_json::to_string(&Summary { row: &row, queries: records.len(), localized: ok }).expect("serializable") + "\n"
    } else {
        results_table(std::slice::from_ref(&row)) + &format!("localized {ok} of {}\n", records.len())
    };
    match out {
        Some(p) => files::write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn synth_scene(s: &Settings, out: &Path, disjoint: bool) -> Result<(), Failure> {
    let scene = SynthScene::generate(&s.synth)?;
    files::write_json(&out.join("intrinsics.json"), &s.synth.intrinsics)?;
    files::write(&out.join("scene.toml"), toml::to_string(&s.synth).expect("serializable"))?;
    for (i, f) in scene.frames.iter().enumerate() {
        let base = out.join("map").join(format!("frame-{i:03}"));
        files::write_keypoints(&base.with_extension("kp"), &f.keypoints())?;
        files::write_pose(&base.with_extension("pose.txt"), &f.pose)?;
        files::write_depths(&base.with_extension("kpdepth"), &f.depths())?;
    }
    let mut queries: Vec<(String, &sfp_core::eval::SynthFrame)> =
        scene.queries.iter().enumerate().map(|(i, q)| (format!("query-{i:03}"), q)).collect();
    let far = scene.disjoint_query(s.synth.seed.wrapping_add(1));
    if disjoint {
        queries.push(("outside-000".into(), &far));
    }
    for (name, q) in &queries {
        let base = out.join("queries").join(name);
        files::write_keypoints(&base.with_extension("kp"), &q.keypoints())?;
        files::write_pose(&base.with_extension("pose.txt"), &q.pose)?;
    }
    println!(
        "wrote {} mapping frames and {} queries ({} landmarks) to {}",
        scene.frames.len(),
        queries.len(),
        scene.landmarks.len(),
        out.display()
    );
    Ok(())
}

fn format_homography(h: &nalgebra::Matrix3<f64>) -> String {
    (0..3).map(|r| (0..3).map(|c| format!("{:.17e}", h[(r, c)])).collect::<Vec<_>>().join(" ") + "\n").collect()
}

pub fn synth_homography(s: &Settings, out: &Path) -> Result<(), Failure> {
    let pairs = synth_homography_pairs(&s.homography)?;
    for (i, p) in pairs.iter().enumerate() {
        let dir = out.join(format!("pair-{i:03}"));
        files::write_keypoints(&dir.join("a.kp"), &p.a)?;
        files::write_keypoints(&dir.join("b.kp"), &p.b)?;
        files::write(&dir.join("H.txt"), format_homography(&p.homography))?;
    }
    println!("wrote {} homography pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn sub_dirs(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    files::require_dir(dir)?;
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn is_sequence(dir: &Path) -> bool {
    std::fs::read_dir(dir)
        .map(|it| it.filter_map(|e| e.ok()).any(|e| e.file_name().to_str().is_some_and(|n| n.starts_with("H_1_"))))
        .unwrap_or(false)
}

fn image_keypoints(path: &Path, params: &NetParams, s: &Settings) -> Result<Vec<Keypoint>, Failure> {
    let image = files::read_image(path, params.config.in_channels, params.config.divisor())?;
    let pyramid = encode(&image, params)?;
    Ok(extract_keypoints(&pyramid, &s.extract.to_config())?.into_iter().flatten().collect())
}

pub fn mma(s: &Settings, dir: &Path, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let mut pairs: Vec<MmaPair> = Vec::new();
    let sequences: Vec<PathBuf> = if is_sequence(dir) { vec![dir.to_path_buf()] } else { sub_dirs(dir)?.into_iter().filter(|d| is_sequence(d)).collect() };
    if !sequences.is_empty() {
        let ckpt = checkpoint.ok_or_else(|| Failure::Usage("image sequences need --checkpoint".into()))?;
        let params = load_checkpoint(ckpt).map_err(|e| io_err(ckpt, e))?;
        let jobs: Vec<_> = sequences.iter().map(|d| scan_homography_sequence(d).map_err(|e| io_err(d, e))).collect::<Result<Vec<_>, _>>()?;
        let jobs: Vec<_> = jobs.into_iter().flatten().collect();
        pairs = jobs
            .par_iter()
            .map(|e| {
                Ok(MmaPair {
                    a: image_keypoints(&e.reference, &params, s)?,
                    b: image_keypoints(&e.target, &params, s)?,
                    homography: e.homography,
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
    } else {
        for d in sub_dirs(dir)? {
            let (a, b, h) = (d.join("a.kp"), d.join("b.kp"), d.join("H.txt"));
            if !(a.is_file() && b.is_file() && h.is_file()) {
                continue;
            }
            let homography = parse_homography(&files::read_text(&h)?).map_err(|e| io_err(&h, e))?;
            pairs.push(MmaPair { a: files::read_keypoints(&a)?, b: files::read_keypoints(&b)?, homography });
        }
    }
    if pairs.is_empty() {
        return Err(Failure::Pipeline(format!("{}: no image pairs", dir.display())));
    }
    let matcher = MutualNearestMatcher { floor: s.mma.floor };
    let curve = sfp_core::eval::mma(&pairs, &matcher, &s.mma.thresholds)?;
    let text = mma_curve_text(&curve);
    match out {
        Some(p) => files::write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}
