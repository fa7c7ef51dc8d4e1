use sfp_core::eval::{pose_error, SynthConfig, SynthScene};
use sfp_core::localize::{localize, LocalizerConfig, ReportRecord};
use sfp_core::map::{build_map, deserialize_map, serialize_map, shorten_descriptors, LandmarkMap, MapConfig};

fn scene(config: SynthConfig) -> SynthScene {
    SynthScene::generate(&config).unwrap()
}

fn map_of(s: &SynthScene, with_depth: bool) -> LandmarkMap {
    let frames: Vec<_> = s.frames.iter().map(|f| f.posed_keypoints(with_depth)).collect();
    build_map(&frames, &MapConfig::new(s.plan.clone(), s.config.intrinsics)).unwrap()
}

/// Fraction of visible landmarks with a map landmark within `tol` meters
/// at the same deepest level.
fn recovered(s: &SynthScene, map: &LandmarkMap, tol: f64) -> f64 {
    let visible: Vec<usize> = s.visibility_counts().iter().enumerate().filter(|(_, &c)| c > 0).map(|(i, _)| i).collect();
    let hit = visible
        .iter()
        .filter(|&&i| {
            let t = &s.landmarks[i];
            map.landmarks.iter().any(|l| (l.position_f64() - t.position).norm() <= tol && l.level == t.level)
        })
        .count();
    hit as f64 / visible.len() as f64
}

#[test]
fn depth_map_recovers_every_visible_landmark_once() {
    let s = scene(SynthConfig::default());
    let map = map_of(&s, true);
    let visible = s.visibility_counts().iter().filter(|&&c| c > 0).count();
    assert_eq!(map.landmarks.len(), visible);
    assert!(recovered(&s, &map, 1e-5) >= 0.99);
    assert!(map.landmarks.iter().all(|l| l.observations >= 1));
}

#[test]
fn triangulated_map_recovers_landmarks() {
    let s = scene(SynthConfig::default());
    let map = map_of(&s, false);
    let r = recovered(&s, &map, 1e-4);
    assert!(r >= 0.99, "recovered {r}");
}

#[test]
fn mapping_frame_as_query_returns_its_pose() {
    let s = scene(SynthConfig::default());
    let map = map_of(&s, true);
    let cfg = LocalizerConfig::for_plan(&s.plan);
    for (i, f) in s.frames.iter().enumerate() {
        let r = localize(&f.query(&format!("f{i}"), s.config.intrinsics), &map, &cfg).unwrap();
        assert!(r.success);
        let e = pose_error(&r.pose.unwrap(), &f.pose);
        assert!(e.translation < 1e-6 && e.rotation < 1e-6, "frame {i}: {e:?}");
    }
}

#[test]
fn noisy_trace_never_ends_worse_than_it_starts() {
    for seed in 0..5 {
        let s = scene(SynthConfig { seed, noise_px: 1.0, ..SynthConfig::default() });
        let map = map_of(&s, true);
        let cfg = LocalizerConfig::for_plan(&s.plan);
        for (i, q) in s.queries.iter().enumerate() {
            let r = localize(&q.query("q", s.config.intrinsics), &map, &cfg).unwrap();
            assert!(r.success, "seed {seed} query {i}");
            let levels: Vec<u8> = r.trace.iter().map(|t| t.level).collect();
            assert_eq!(levels, vec![3, 2, 1]);
            let first = pose_error(&r.trace[0].pose, &q.pose);
            let last = pose_error(&r.trace[2].pose, &q.pose);
            assert!(last.translation <= first.translation, "seed {seed} query {i}: {first:?} -> {last:?}");
            assert!(last.translation < 0.05, "seed {seed} query {i}: {last:?}");
        }
    }
}

#[test]
fn outliers_and_descriptor_noise_still_localize() {
    let s = scene(SynthConfig { noise_px: 1.0, outlier_rate: 0.2, descriptor_noise: 0.2, ..SynthConfig::default() });
    let map = map_of(&s, true);
    let cfg = LocalizerConfig::for_plan(&s.plan);
    for (i, q) in s.queries.iter().enumerate() {
        let r = localize(&q.query("q", s.config.intrinsics), &map, &cfg).unwrap();
        assert!(r.success, "query {i}");
        let e = pose_error(&r.pose.unwrap(), &q.pose);
        assert!(e.translation < 0.1 && e.rotation < 1.0, "query {i}: {e:?}");
    }
}

#[test]
fn stored_short_map_localizes_like_in_memory_map() {
    let s = scene(SynthConfig { noise_px: 0.5, ..SynthConfig::default() });
    let short = shorten_descriptors(&map_of(&s, true)).unwrap();
    let loaded = deserialize_map(&serialize_map(&short).unwrap()).unwrap();
    let cfg = LocalizerConfig::for_plan(&s.plan);
    for q in &s.queries {
        let query = q.query("q", s.config.intrinsics);
        let a = localize(&query, &short, &cfg).unwrap();
        let b = localize(&query, &loaded, &cfg).unwrap();
        assert_eq!(a.pose, b.pose);
        assert!(a.success);
        let line = ReportRecord::from_result(&a).to_line();
        let back = ReportRecord::from_line(&line).unwrap();
        let pose = back.final_pose().unwrap().unwrap();
        assert!(pose_error(&pose, &a.pose.unwrap()).translation < 1e-12);
    }
}

#[test]
fn out_of_volume_query_is_flagged() {
    let s = scene(SynthConfig::default());
    let map = map_of(&s, true);
    let cfg = LocalizerConfig::for_plan(&s.plan);
    for seed in [0, 1, 2, 99] {
        let far = s.disjoint_query(seed);
        let r = localize(&far.query("far", s.config.intrinsics), &map, &cfg).unwrap();
        assert!(!r.success, "seed {seed}");
    }
}
